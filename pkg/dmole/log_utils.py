"""
日志模块 - 统一的 logger 获取与运行日志文件配置
"""
import logging
from pathlib import Path
from typing import Optional, Union

ROOT_LOGGER = 'dmole'
LOG_FORMAT = '%(asctime)s %(levelname)-7s %(name)s | %(message)s'


def get_logger(name: str) -> logging.Logger:
    """
    获取 dmole 命名空间下的 logger

    Args:
        name: 通常传 __name__

    Returns:
        logging.Logger
    """
    if name == ROOT_LOGGER or name.startswith(ROOT_LOGGER + '.'):
        return logging.getLogger(name)
    return logging.getLogger(f"{ROOT_LOGGER}.{name}")


def configure_logging(level: Union[int, str] = logging.INFO,
                      log_file: Optional[Union[str, Path]] = None) -> logging.Logger:
    """
    配置根 logger：控制台输出 + 可选的运行日志文件

    重复调用不会叠加控制台 handler；log_file 每次调用替换为新的文件 handler。
    """
    logger = logging.getLogger(ROOT_LOGGER)
    logger.setLevel(level)
    formatter = logging.Formatter(LOG_FORMAT)

    has_console = any(getattr(h, '_dmole_console', False) for h in logger.handlers)
    if not has_console:
        console = logging.StreamHandler()
        console.setFormatter(formatter)
        console._dmole_console = True
        logger.addHandler(console)

    for handler in list(logger.handlers):
        if getattr(handler, '_dmole_file', False):
            logger.removeHandler(handler)
            handler.close()

    if log_file is not None:
        Path(log_file).parent.mkdir(parents=True, exist_ok=True)
        file_handler = logging.FileHandler(log_file, encoding='utf-8')
        file_handler.setFormatter(formatter)
        file_handler._dmole_file = True
        logger.addHandler(file_handler)

    return logger


def detach_file_logging() -> None:
    """关闭运行日志文件 handler（一次运行结束时调用）"""
    logger = logging.getLogger(ROOT_LOGGER)
    for handler in list(logger.handlers):
        if getattr(handler, '_dmole_file', False):
            logger.removeHandler(handler)
            handler.close()
