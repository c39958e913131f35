"""
SpikeForge 单时间步 ANN→SNN 转换工具包
基于缩放发放神经元（Scale-and-Fire Neuron），附带可执行的时空等价定理校验
"""

__version__ = "1.0.0"
__author__ = "SpikeForge Team"
