import sys

from cdlora.cli import main

sys.exit(main())
