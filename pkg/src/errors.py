class PanelDataError(ValueError):
    pass


class ConfigError(ValueError):
    pass


class NumericalError(ArithmeticError):
    pass


class DegenerateInstrumentError(NumericalError):
    pass


class DivergenceError(NumericalError):
    pass


class RankDeficiencyError(NumericalError):
    def __init__(self, message: str, columns: list[str]):
        super().__init__(f"{message}: {', '.join(columns)}")
        self.columns = columns


class NuisanceFitError(NumericalError):
    def __init__(self, fold: int, target: str, error: Exception):
        super().__init__(f"fold {fold}: fitting {target} failed: {error}")
        self.fold = fold
        self.target = target


class ReplicationError(RuntimeError):
    pass
