# One module per CLI verb; each exposes register(subparsers, parents) and handle(args) -> exit code
