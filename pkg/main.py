"""Main entry point for kdvlab."""

import sys

from src.kdvlab.app import main

if __name__ == "__main__":
    sys.exit(main())
