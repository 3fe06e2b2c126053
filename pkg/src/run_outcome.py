from enum import Enum


class RunOutcome(int, Enum):
    SUCCESS = 0
    DATA_ERROR = 2
    NUMERICAL_FAILURE = 3
