from argparse import Namespace
from pathlib import Path

from config import config
from routers.dispatcher import EXIT_OK, Router, argument
from services.training import TrainConfig, evaluate, load_datasets, make_model, train

router = Router()

# Флаги, перекрывающие поля JSON-конфига (None: флаг не задан)
CONFIG_OVERRIDES = [
    argument("--config", type=Path, default=None, help="JSON-файл с полями TrainConfig"),
    argument("--model", default=None),
    argument("--block", default=None),
    argument("--attention", default=None),
    argument("--reduction", type=int, default=None),
    argument("--pooling", default=None),
    argument("--dct-components", type=int, default=None),
    argument("--sources", nargs="+", default=None),
    argument("--integration", default=None),
    argument("--bypass-attention", action="store_true", default=None),
    argument("--optimizer", default=None),
    argument("--lr", type=float, default=None),
    argument("--momentum", type=float, default=None),
    argument("--epochs", type=int, default=None),
    argument("--batch-size", type=int, default=None),
    argument("--seed", type=int, default=None),
    argument("--dataset", default=None),
    argument("--data-path", type=Path, default=None),
    argument("--samples", type=int, default=None),
    argument("--classes", type=int, default=None),
    argument("--image-size", type=int, default=None),
    argument("--width", type=int, default=None),
]


def train_config_from_args(args: Namespace) -> TrainConfig:
    """
    Собрать TrainConfig: файл, затем флаги командной строки поверх него
    """

    base = TrainConfig.from_json(args.config) if args.config else TrainConfig(seed=config.seed)
    overrides = {
        name: value
        for name, value in vars(args).items()
        if name in TrainConfig.model_fields and value is not None
    }
    # model_copy не проверяет значения, поэтому проверяем результат заново
    return TrainConfig.model_validate(base.model_copy(update=overrides).model_dump())


@router.command(
    "train",
    help="Обучение игрушечной модели; журнал epoch,loss,acc",
    arguments=[
        *CONFIG_OVERRIDES,
        argument("--save", type=Path, default=None, help="куда сохранить веса (.npz)"),
        argument("--log", type=Path, default=None, help="файл журнала метрик"),
    ],
)
def train_command(args: Namespace) -> int:
    cfg = train_config_from_args(args)
    result = train(cfg)
    lines = ["epoch,loss,acc", *(m.to_line() for m in result.history)]
    print("\n".join(lines))
    print(f"train_acc={result.train_accuracy:.6f} eval_acc={result.eval_accuracy:.6f}")
    if args.log is not None:
        args.log.write_text("\n".join(lines) + "\n", encoding="utf-8")
    if args.save is not None:
        result.model.save(args.save)
    return EXIT_OK


@router.command(
    "evaluate",
    help="Точность top-1 сохраненной модели",
    arguments=[
        *CONFIG_OVERRIDES,
        argument("--weights", type=Path, required=True),
        argument("--split", choices=["train", "eval"], default="eval"),
    ],
)
def evaluate_command(args: Namespace) -> int:
    cfg = train_config_from_args(args)
    train_set, eval_set = load_datasets(cfg)
    dataset = train_set if args.split == "train" else eval_set
    model = make_model(cfg, dataset.classes)
    model.load(args.weights)
    accuracy = evaluate(model, dataset)
    print(f"top1={accuracy:.6f}")
    return EXIT_OK
