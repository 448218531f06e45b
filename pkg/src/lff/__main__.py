import sys

from lff.cli import main

sys.exit(main())
