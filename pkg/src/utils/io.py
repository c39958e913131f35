"""
文件读写工具
所有输出文件先写入同目录临时文件，再原子替换到目标路径
"""

import contextlib
import io
import os
import tempfile
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Union

import pandas as pd
import yaml

from spikeforge.errors import SchemaError

PathLike = Union[str, os.PathLike]


def atomic_write_text(path: PathLike, text: str) -> Path:
    """原子写入文本文件"""
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_path = tempfile.mkstemp(dir=target.parent, prefix=f".{target.name}.", suffix='.tmp')
    try:
        with os.fdopen(fd, 'w', encoding='utf-8') as f:
            f.write(text)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp_path, target)
    except BaseException:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(tmp_path)
        raise
    return target


def dump_yaml_text(data: Dict[str, Any]) -> str:
    """规范化 YAML 文本（键保持插入顺序）"""
    return yaml.safe_dump(data, sort_keys=False, allow_unicode=True, default_flow_style=False)


def write_yaml(data: Dict[str, Any], path: PathLike) -> Path:
    """写入 YAML 文档"""
    return atomic_write_text(path, dump_yaml_text(data))


def read_yaml(path: PathLike) -> Dict[str, Any]:
    """读取 YAML 文档，顶层必须是映射"""
    with open(path, 'r', encoding='utf-8') as f:
        try:
            data = yaml.safe_load(f)
        except yaml.YAMLError as e:
            raise SchemaError(f"YAML 解析失败: {path}: {e}") from e
    if not isinstance(data, dict):
        raise SchemaError(f"文档顶层必须是映射: {path}", field='<root>')
    return data


def write_csv(rows: Union[pd.DataFrame, Iterable[Dict[str, Any]]], path: PathLike,
              columns: Optional[List[str]] = None) -> Path:
    """写入 CSV（列顺序由 columns 指定）"""
    df = rows if isinstance(rows, pd.DataFrame) else pd.DataFrame(list(rows), columns=columns)
    if columns is not None:
        df = df[columns]
    buffer = io.StringIO()
    df.to_csv(buffer, index=False)
    return atomic_write_text(path, buffer.getvalue())


def pydantic_field_path(loc: Iterable[Any]) -> str:
    """把 pydantic 错误位置元组转成点分字段路径"""
    return '.'.join(str(part) for part in loc) or '<root>'
