import sys

from exprag.commands import main

if __name__ == "__main__":
    sys.exit(main())
