class BridgeAttentionError(Exception):
    """Базовая ошибка библиотеки"""


class ShapeError(BridgeAttentionError, ValueError):
    """Несогласованные размерности тензоров"""


class NonFiniteError(BridgeAttentionError, ArithmeticError):
    """В результате операции появились NaN/Inf"""


class DegenerateBatchError(BridgeAttentionError, ValueError):
    """BatchNorm в режиме обучения получил батч из одного элемента"""


class DegenerateFeatureError(BridgeAttentionError, ValueError):
    """Признаки постоянны, HSIC равен нулю"""


class FormatError(BridgeAttentionError, ValueError):
    """Файл данных не соответствует ожидаемому формату"""


class TapError(BridgeAttentionError, LookupError):
    """Запрошенная точка съема признаков отсутствует"""


class ConfigError(BridgeAttentionError, ValueError):
    """Некорректная конфигурация"""


class DivergenceError(BridgeAttentionError, ArithmeticError):
    """Обучение разошлось (loss стал NaN/Inf)"""
