import sys

from mfcontrol.cli import main

sys.exit(main())
