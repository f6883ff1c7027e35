from argparse import Namespace

from config import config
from routers.dispatcher import EXIT_CHECK_FAILED, EXIT_OK, Router, argument
from services.gradcheck_suites import SUITES, run_suite

router = Router()


@router.command(
    "gradcheck",
    help="Сравнение градиентов с конечными разностями",
    arguments=[
        argument("--suite", choices=[*SUITES, "all"], default="all"),
        argument("--seed", type=int, default=None),
    ],
)
def gradcheck_command(args: Namespace) -> int:
    seed = config.seed if args.seed is None else args.seed
    outcomes = run_suite(args.suite, seed)
    for outcome in outcomes:
        mark = "✅" if outcome.passed else "❌"
        print(f"{mark} {outcome.suite}/{outcome.name:<26} {outcome.result.max_relative_error:.2e}  < {outcome.threshold:.0e}")
    failed = [o for o in outcomes if not o.passed]
    print(f"Пройдено {len(outcomes) - len(failed)} из {len(outcomes)}")
    return EXIT_CHECK_FAILED if failed else EXIT_OK
