import sys

from promptreg.cli import main

sys.exit(main())
