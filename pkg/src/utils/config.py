"""
配置管理
默认配置以 YAML 文本内置，用户配置文件按键深度合并后统一校验
"""

import copy
import os
from typing import Any, Dict, List, Literal, Optional

import yaml
from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from spikeforge.errors import ConfigError
from utils.io import pydantic_field_path

SEED_ENV_VAR = 'SPIKEFORGE_SEED'


class _Section(BaseModel):
    model_config = ConfigDict(extra='forbid')


class LoggingSection(_Section):
    level: Literal['DEBUG', 'INFO', 'WARNING', 'ERROR'] = 'INFO'
    log_dir: Optional[str] = None
    json_log: bool = False


class CalibrationSection(_Section):
    p: float = Field(1.0, gt=0, le=50)
    fraction: float = Field(0.02, gt=0, le=1)
    histogram_bins: int = Field(256, ge=1)
    workers: int = Field(1, ge=1)


class ConversionSection(_Section):
    M: int = Field(8, ge=1, le=20)
    fire_function: Literal['sformer', 'linear', 'exponential'] = 'sformer'
    lambda_: float = Field(1.0, gt=0, le=1, alias='lambda')

    model_config = ConfigDict(extra='forbid', populate_by_name=True)


class TuningSection(_Section):
    trials: int = Field(50, ge=2)
    init_points: int = Field(10, ge=1)
    xi: float = Field(0.01, ge=0)
    fraction: float = Field(0.02, gt=0, le=1)
    objective: Literal['accuracy', 'accuracy_energy'] = 'accuracy_energy'
    energy_weight: float = Field(0.01, ge=0)


class VerificationSection(_Section):
    trials: int = Field(10000, ge=1)
    max_T: int = Field(64, ge=1)
    dyadic_bits: int = Field(20, ge=1, le=40)
    tolerance: float = Field(1e-12, gt=0)
    network_tolerance: float = Field(1e-9, gt=0)
    trend_T: List[int] = Field(default_factory=lambda: [4, 64])


class SweepsSection(_Section):
    T_max: int = Field(32, ge=1)
    seeds: List[int] = Field(default_factory=lambda: [0, 1, 2])
    v0_fraction: float = Field(0.5, ge=0, lt=1)
    lambda_steps: int = Field(40, ge=1)
    p_values: List[float] = Field(default_factory=lambda: [0.5, 1.0, 1.5, 2.0, 2.5])
    spike_lambdas: List[float] = Field(default_factory=lambda: [0.25, 0.5, 1.0])


class EnergySection(_Section):
    e_ac: float = Field(0.9, gt=0)
    e_mac: float = Field(4.6, gt=0)


class SpikeForgeConfig(_Section):
    version: str = '1.0'
    seed: int = 0
    logging: LoggingSection = Field(default_factory=LoggingSection)
    calibration: CalibrationSection = Field(default_factory=CalibrationSection)
    conversion: ConversionSection = Field(default_factory=ConversionSection)
    tuning: TuningSection = Field(default_factory=TuningSection)
    verification: VerificationSection = Field(default_factory=VerificationSection)
    sweeps: SweepsSection = Field(default_factory=SweepsSection)
    energy: EnergySection = Field(default_factory=EnergySection)


class ConfigManager:
    DEFAULT_CONFIG = '''# SpikeForge 默认配置
version: "1.0"
seed: 0

logging:
    level: INFO
    log_dir: null
    json_log: false

calibration:
    p: 1.0                # 百分位归一化参数，取 (0, 50]
    fraction: 0.02        # 校准子样本比例
    histogram_bins: 256
    workers: 1

conversion:
    M: 8
    fire_function: sformer
    lambda: 1.0

tuning:
    trials: 50
    init_points: 10       # 先做的均匀随机探测次数
    xi: 0.01
    fraction: 0.02
    objective: accuracy_energy
    energy_weight: 0.01

verification:
    trials: 10000
    max_T: 64
    dyadic_bits: 20
    tolerance: 1.0e-12
    network_tolerance: 1.0e-9
    trend_T: [4, 64]

sweeps:
    T_max: 32
    seeds: [0, 1, 2]
    v0_fraction: 0.5
    lambda_steps: 40
    p_values: [0.5, 1.0, 1.5, 2.0, 2.5]
    spike_lambdas: [0.25, 0.5, 1.0]

energy:
    e_ac: 0.9             # pJ, 45nm
    e_mac: 4.6
'''

    @classmethod
    def load_config(cls, config_path: Optional[str] = None) -> SpikeForgeConfig:
        """加载配置文件（未指定时使用默认配置）"""
        config = yaml.safe_load(cls.DEFAULT_CONFIG)
        if config_path:
            if not os.path.exists(config_path):
                raise ConfigError(f"配置文件不存在: {config_path}", flag='--config')
            with open(config_path, 'r', encoding='utf-8') as f:
                try:
                    user_config = yaml.safe_load(f) or {}
                except yaml.YAMLError as e:
                    raise ConfigError(f"配置文件解析失败: {e}", flag='--config') from e
            if not isinstance(user_config, dict):
                raise ConfigError("配置文件顶层必须是映射", flag='--config')
            config = cls._deep_merge(config, user_config)

        try:
            return SpikeForgeConfig.model_validate(config)
        except ValidationError as e:
            first = e.errors()[0]
            key = pydantic_field_path(first['loc'])
            raise ConfigError(f"配置项 {key} 无效: {first['msg']}", flag=key) from e

    @staticmethod
    def _deep_merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
        merged = copy.deepcopy(base)
        for key, value in override.items():
            if isinstance(value, dict) and isinstance(merged.get(key), dict):
                merged[key] = ConfigManager._deep_merge(merged[key], value)
            else:
                merged[key] = value
        return merged

    @staticmethod
    def resolve_seed(cli_seed: Optional[int], config: SpikeForgeConfig) -> int:
        """种子优先级: 命令行 > 环境变量 > 配置文件"""
        if cli_seed is not None:
            return cli_seed
        load_dotenv()
        env_value = os.getenv(SEED_ENV_VAR)
        if env_value is not None and env_value.strip():
            try:
                return int(env_value)
            except ValueError:
                raise ConfigError(f"环境变量 {SEED_ENV_VAR} 不是整数: {env_value!r}",
                                  flag=SEED_ENV_VAR) from None
        return config.seed
