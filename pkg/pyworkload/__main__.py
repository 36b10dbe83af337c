import sys
from pyworkload import cli

sys.exit(cli.main())
