import sys

from fedmobfair.cli import main

sys.exit(main())
