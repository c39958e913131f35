"""
日志初始化
文本格式输出到控制台，可选写入按日期命名的文本日志和 JSON 日志
"""

import logging
import os
from datetime import datetime
from typing import Optional

LOGGER_NAME = 'SpikeForge'
FMT_TEXT = '%(asctime)s [%(levelname)s] %(name)s: %(message)s'
FMT_JSON = '{"time":"%(asctime)s","level":"%(levelname)s","logger":"%(name)s","msg":"%(message)s"}'
DATE_FMT = '%Y-%m-%d %H:%M:%S'


def setup_logger(level: str = 'INFO', log_dir: Optional[str] = None,
                 json_log: bool = False) -> logging.Logger:
    """配置根日志器 SpikeForge，重复调用只更新级别"""
    logger = logging.getLogger(LOGGER_NAME)
    logger.setLevel(level.upper())

    # 防止重复添加 handler
    if logger.handlers:
        return logger

    console_handler = logging.StreamHandler()
    console_handler.setFormatter(logging.Formatter(FMT_TEXT, DATE_FMT))
    logger.addHandler(console_handler)

    if log_dir:
        os.makedirs(log_dir, exist_ok=True)
        stamp = datetime.now().strftime('%Y%m%d')

        file_handler = logging.FileHandler(
            os.path.join(log_dir, f"spikeforge_{stamp}.log"), encoding='utf-8')
        file_handler.setFormatter(logging.Formatter(FMT_TEXT, DATE_FMT))
        logger.addHandler(file_handler)

        if json_log:
            json_handler = logging.FileHandler(
                os.path.join(log_dir, f"spikeforge_{stamp}.json.log"), encoding='utf-8')
            json_handler.setFormatter(logging.Formatter(FMT_JSON, DATE_FMT))
            logger.addHandler(json_handler)

    return logger


def get_logger(module: str) -> logging.Logger:
    """获取模块子日志器"""
    return logging.getLogger(f"{LOGGER_NAME}.{module}")
