import sys

from trustgrid.cli import main

sys.exit(main())
