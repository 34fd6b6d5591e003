import sys

from fairdi.cli import main

sys.exit(main())
