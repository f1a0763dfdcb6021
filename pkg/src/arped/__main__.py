import sys

from arped.cli import main

sys.exit(main())
