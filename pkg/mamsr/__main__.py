import sys

from mamsr.cli import main

if __name__ == "__main__":
    sys.exit(main())
