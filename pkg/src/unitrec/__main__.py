import sys

from unitrec.cli import main

sys.exit(main())
