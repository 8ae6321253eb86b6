# logger.py — Настройка логирования в файл и консоль

import logging
from pathlib import Path
from typing import Optional


def setup_logging(log_file: Optional[Path] = None, level: str = "INFO") -> logging.Logger:
    logger = logging.getLogger("nexus_sim")
    logger.setLevel(level)

    # Повторный вызов (sweep, тесты) не должен дублировать вывод
    for handler in list(logger.handlers):
        logger.removeHandler(handler)
        handler.close()

    formatter = logging.Formatter("%(asctime)s [%(levelname)s] %(message)s")

    if log_file is not None:
        Path(log_file).parent.mkdir(parents=True, exist_ok=True)
        file_handler = logging.FileHandler(log_file, encoding="utf-8")
        file_handler.setFormatter(formatter)
        logger.addHandler(file_handler)

    console_handler = logging.StreamHandler()
    console_handler.setFormatter(formatter)
    logger.addHandler(console_handler)

    return logger
