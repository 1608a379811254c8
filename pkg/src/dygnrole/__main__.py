import sys

from dygnrole.cli import main

sys.exit(main())
