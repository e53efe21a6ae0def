"""
sgumlp - SGU-MLP 多模态遥感地物分类
"""

import sys

from src.main import main

if __name__ == "__main__":
    sys.exit(main())
