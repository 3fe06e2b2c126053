import os
from typing import Mapping

from dotenv import load_dotenv

from errors import ConfigError


def load():
    src_dir = os.path.dirname(__file__)
    project_root = os.path.dirname(src_dir)

    for dotenv_path in (
        os.path.join(project_root, ".env"),
        os.path.join(src_dir, ".env"),
    ):
        if os.path.exists(dotenv_path):
            load_dotenv(dotenv_path)
            break


def env_int(name: str, environ: Mapping[str, str] | None = None) -> int | None:
    raw_value = (os.environ if environ is None else environ).get(name)
    if raw_value is None or not raw_value.strip():
        return None

    try:
        return int(raw_value)
    except ValueError as error:
        raise ConfigError(f"{name} must be an integer, got {raw_value!r}") from error


def env_seed(environ: Mapping[str, str] | None = None) -> int | None:
    return env_int("PIVDML_SEED", environ)


def env_threads(environ: Mapping[str, str] | None = None) -> int | None:
    threads = env_int("PIVDML_THREADS", environ)
    if threads is not None and threads < 1:
        raise ConfigError("PIVDML_THREADS must be at least 1")
    return threads
