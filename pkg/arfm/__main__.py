import sys

from arfm.cli import main

sys.exit(main())
