import sys

from tmur.cli import main

sys.exit(main())
