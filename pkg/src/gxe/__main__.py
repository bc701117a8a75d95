import sys

from gxe.cli import main

sys.exit(main())
