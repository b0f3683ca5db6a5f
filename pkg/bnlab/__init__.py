# This file makes the bnlab directory a Python package
