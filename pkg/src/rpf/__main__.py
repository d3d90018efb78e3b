import sys

from rpf.cli import main

sys.exit(main())
