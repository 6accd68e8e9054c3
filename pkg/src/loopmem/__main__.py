import sys

from loopmem.cli import main

sys.exit(main())
