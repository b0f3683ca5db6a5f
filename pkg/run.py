#!/usr/bin/env python3
"""
Convenience script to run the bnlab CLI from a checkout
"""
import sys

from bnlab.app import main

if __name__ == '__main__':
    sys.exit(main())
