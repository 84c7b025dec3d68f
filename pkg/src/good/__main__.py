"""Module entry point: python -m good."""

from .cli import main

if __name__ == "__main__":
    main()
