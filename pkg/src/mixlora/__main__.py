import sys

from mixlora.cli import main

sys.exit(main())
