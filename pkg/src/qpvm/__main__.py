import sys

from qpvm.cli import main

sys.exit(main())
