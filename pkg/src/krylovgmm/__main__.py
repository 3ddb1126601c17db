import sys

from krylovgmm.cli import main

sys.exit(main())
