import sys

from pnpcert.cli import main

sys.exit(main())
