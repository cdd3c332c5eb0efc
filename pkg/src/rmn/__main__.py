import sys

from rmn.cli import main

sys.exit(main())
