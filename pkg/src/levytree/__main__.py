from levytree.cli import main
import sys

sys.exit(main())
