from argparse import Namespace
from pathlib import Path

from routers.dispatcher import EXIT_OK, Router, argument
from routers.trainRouter import CONFIG_OVERRIDES, train_config_from_args
from services.cka import importance_matrix
from services.training import load_datasets, make_model

router = Router()


@router.command(
    "cka",
    help="Матрица важности ветвей моста по CKA (m = --samples)",
    arguments=[
        *CONFIG_OVERRIDES,
        argument("--weights", type=Path, default=None, help="веса обученной модели"),
        argument("--out", type=Path, default=None, help="путь для CSV"),
    ],
)
def cka_command(args: Namespace) -> int:
    cfg = train_config_from_args(args)
    dataset, _ = load_datasets(cfg)
    model = make_model(cfg, dataset.classes)
    if args.weights is not None:
        model.load(args.weights)
    matrix = importance_matrix(model, dataset, min(cfg.samples, len(dataset)), seed=cfg.seed)
    print(",".join(["block", *matrix.branches]))
    for row in matrix.rows():
        print(",".join([row.block, *("" if v is None else f"{v:.4f}" for v in row.scores)]))
    if args.out is not None:
        matrix.to_csv(args.out)
    return EXIT_OK
