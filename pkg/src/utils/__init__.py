"""
SpikeForge 公共工具模块
提供配置、日志和文件读写等基础设施
"""

__version__ = "1.0.0"
__author__ = "SpikeForge Team"
