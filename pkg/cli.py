import sys

from adapters.cli_adapter import main

if __name__ == "__main__":
    sys.exit(main())
