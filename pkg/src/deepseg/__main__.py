import sys

from deepseg.cli import main

sys.exit(main())
