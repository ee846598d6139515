import sys

from lifelong_ps.cli import main

sys.exit(main())
