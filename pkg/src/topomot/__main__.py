import sys

from .motio.cli import main

sys.exit(main())
