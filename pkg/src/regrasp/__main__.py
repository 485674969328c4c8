import sys

from regrasp.cli import main

sys.exit(main())
