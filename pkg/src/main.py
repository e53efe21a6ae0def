"""
sgumlp 命令行入口
"""

import argparse
import sys
from typing import List, Optional

from src.cli import commands
from src.core.config import load_settings
from src.core.data import SCENE_PROFILES
from src.core.env import get_log_level, load_env
from src.core.errors import SguMlpError
from src.core.layers import CLI_VARIANTS
from src.utils.logging_utils import setup_logging


def _add_setting_flags(parser: argparse.ArgumentParser) -> None:
    """训练相关的覆盖项；未给出时取配置文件或默认值"""
    parser.add_argument("--data", required=True, help="场景目录（含 scene.json）")
    parser.add_argument("--out", required=True, help="输出目录")
    parser.add_argument("--epochs", type=int, help="训练轮数")
    parser.add_argument("--batch-size", dest="batch_size", type=int, help="批大小")
    parser.add_argument("--lr", type=float, help="学习率")
    parser.add_argument("--optimizer", choices=["adam", "sgd_momentum"])
    parser.add_argument("--dtype", choices=["float32", "float64"])
    parser.add_argument("--workers", type=int, help="评估线程数")
    parser.add_argument("--train-fraction", dest="train_fraction", type=float, help="分层划分的训练比例")
    parser.add_argument("--hidden-dim", dest="hidden_dim", type=int)
    parser.add_argument("--ffn-dim", dest="mixer_ffn_dim", type=int)
    parser.add_argument("--blocks", dest="num_blocks", type=int)
    parser.add_argument("--token-segment", dest="token_segment", type=int)
    parser.add_argument("--patch-window", dest="patch_window", type=int)
    parser.add_argument("--kernels", dest="dwc_kernels", help="DWC 卷积核尺寸，如 1,3,5")
    parser.add_argument("--sgu-scope", dest="sgu_scope", choices=["both", "channel"])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sgumlp", description="SGU-MLP 多模态遥感地物分类")
    parser.add_argument("--log-level", dest="log_level", help="DEBUG / INFO / WARNING / ERROR")
    parser.add_argument("--config", help="扁平 key=value 配置文件")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="训练单个变体并输出报告")
    _add_setting_flags(p)
    p.add_argument("--variant", choices=list(CLI_VARIANTS))
    p.add_argument("--seed", type=int)
    p.set_defaults(handler=commands.cmd_train)

    p = sub.add_parser("eval", help="用检查点评估标注数据")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--model", help="model.json 路径，默认与检查点同目录")
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=["test", "train", "all"], default="test")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", help="写出 report.txt 的目录；省略则打印到标准输出")
    p.set_defaults(handler=commands.cmd_eval)

    p = sub.add_parser("predict", help="逐像素分类并输出分类图")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--model")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=commands.cmd_predict)

    p = sub.add_parser("ablate", help="四个变体 × 多个种子的消融实验")
    _add_setting_flags(p)
    p.add_argument("--seeds", default="1,2,3", help="逗号分隔的种子列表")
    p.set_defaults(handler=commands.cmd_ablate)

    p = sub.add_parser("synth", help="生成合成多模态场景")
    p.add_argument("--out", required=True)
    p.add_argument("--profile", choices=list(SCENE_PROFILES))
    p.add_argument("--classes", type=int)
    p.add_argument("--bands", help="各模态波段数，如 8,4,1")
    p.add_argument("--height", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--noise", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--holdout", type=float, help="另存独立测试标签的比例 (0, 1)")
    p.set_defaults(handler=commands.cmd_synth)

    p = sub.add_parser("gradcheck", help="有限差分梯度检查")
    p.add_argument("--variant", choices=list(CLI_VARIANTS))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--blocks", type=int, default=1)
    p.set_defaults(handler=commands.cmd_gradcheck)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """主入口函数，返回退出码"""
    load_env()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        level = args.log_level or get_log_level()
        if not level:
            level = load_settings().get("logging", {}).get("level")
        setup_logging(level)
        return args.handler(args)
    except SguMlpError as e:
        print(f"错误: {e}", file=sys.stderr)
        return e.exit_code
    except (OSError, ValueError) as e:
        print(f"错误: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
