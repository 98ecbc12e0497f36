"""
Entry point for running the sparse graph attention CLI as a module.
"""
from .cli import main

if __name__ == "__main__":
    main()
