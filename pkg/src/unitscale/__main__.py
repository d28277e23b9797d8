import sys

from unitscale.cli import main

sys.exit(main())
