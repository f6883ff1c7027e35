import logging
import sys
from typing import Optional, Sequence

from config import config
from routers.ablateRouter import router as ablate_router
from routers.auditRouter import router as audit_router
from routers.ckaRouter import router as cka_router
from routers.dispatcher import Dispatcher
from routers.gradcheckRouter import router as gradcheck_router
from routers.trainRouter import router as train_router

# Настройка логирования
logging.basicConfig(
    level=config.log_level,
    format="%(asctime)s - %(name)s - %(levelname)s - %(message)s"
)
logger = logging.getLogger(__name__)


def build_dispatcher() -> Dispatcher:
    dp = Dispatcher()

    # Настройка роутеров
    dp.include_router(audit_router)
    dp.include_router(gradcheck_router)
    dp.include_router(train_router)
    dp.include_router(cka_router)
    dp.include_router(ablate_router)
    return dp


def cli(argv: Optional[Sequence[str]] = None) -> int:
    dp = build_dispatcher()
    try:
        return dp.feed(argv)
    except KeyboardInterrupt:
        logger.error("Прервано пользователем")
        return 1
    finally:
        logger.debug("Работа завершена")


if __name__ == "__main__":
    sys.exit(cli())
