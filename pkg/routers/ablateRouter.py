from argparse import Namespace
from pathlib import Path

from routers.dispatcher import EXIT_CHECK_FAILED, EXIT_OK, EXIT_USAGE, Router, argument
from routers.trainRouter import CONFIG_OVERRIDES, train_config_from_args
from services.ablation import (
    ablate_integration,
    ablate_pooling,
    ablate_sources,
    format_ablation_table,
    write_ablation_csv,
)

router = Router()

ABLATION_EPOCHS = 5


@router.command(
    "ablate",
    help="Сравнение вариантов на игрушечном масштабе",
    arguments=[
        argument("--pooling", dest="ablate_pooling", action="store_true", help="четыре стратегии сжатия"),
        argument("--sources", dest="ablate_sources", action="store_true", help="шесть конфигураций источников моста"),
        argument("--integration", dest="ablate_integration", action="store_true", help="встраивание в трансформер"),
        *(arg for arg in CONFIG_OVERRIDES if arg.flags not in (("--pooling",), ("--sources",), ("--integration",))),
        argument("--out", type=Path, default=None, help="путь для CSV"),
    ],
)
def ablate_command(args: Namespace) -> int:
    if args.epochs is None:
        args.epochs = ABLATION_EPOCHS
    cfg = train_config_from_args(args)
    code = EXIT_OK
    rows = []
    if args.ablate_pooling:
        rows += ablate_pooling(cfg)
    if args.ablate_sources:
        source_rows, checks = ablate_sources(cfg)
        rows += source_rows
        for check in checks:
            mark = "✅" if check.passed else "❌"
            print(f"{mark} {check.variant:<14} форма {check.output_shape}, градиент {check.gradcheck.max_relative_error:.2e}")
        if not all(check.passed for check in checks):
            code = EXIT_CHECK_FAILED
    if args.ablate_integration:
        rows += ablate_integration(cfg)
    if not rows:
        print("Укажите --pooling, --sources или --integration")
        return EXIT_USAGE
    print(format_ablation_table(rows))
    if args.out is not None:
        write_ablation_csv(rows, args.out)
    return code
