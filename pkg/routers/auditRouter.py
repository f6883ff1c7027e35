from argparse import Namespace
from pathlib import Path

from routers.dispatcher import EXIT_CHECK_FAILED, EXIT_OK, Router, argument
from services.attention import PoolingStrategy
from services.audit import STAGE_PLANS, audit_service, build_arch

router = Router()


@router.command(
    "audit",
    help="Подсчет параметров и FLOPs с проверкой по эталонной таблице",
    arguments=[
        argument("--arch", choices=sorted(STAGE_PLANS), default="resnet50"),
        argument("--attn", choices=["none", "se", "bav1", "bav2"], default="none"),
        argument("--r", type=int, default=16),
        argument("--dataset", choices=["imagenet", "cifar10", "cifar100"], default="imagenet"),
        argument("--sources", nargs="+", default=None, help="точки съема признаков моста"),
        argument("--pooling", choices=["avg", "avg_max", "avg_std", "dct"], default="avg"),
        argument("--out", type=Path, default=None, help="путь для JSON-отчета"),
    ],
)
def audit_command(args: Namespace) -> int:
    spec = build_arch(
        args.arch, args.attn, args.r, args.dataset,
        sources=args.sources, pooling=PoolingStrategy(kind=args.pooling)
    )
    report = audit_service.audit_report(spec)
    print(audit_service.print_audit_report(report))
    if args.out is not None:
        args.out.write_text(report.model_dump_json(indent=2), encoding="utf-8")
    return EXIT_CHECK_FAILED if report.status == "FAIL" else EXIT_OK
