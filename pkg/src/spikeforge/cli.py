#!/usr/bin/env python3
"""
SpikeForge 命令行
定理校验、校准、转换、λ 调参、评估、能耗报告、绘图数据导出以及玩具网络训练。
退出码: 0 成功；1 参数 / 文件错误；2 定理校验失败
"""

import argparse
import os
from dataclasses import asdict
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, ValidationError
from rich.console import Console
from rich.markup import escape
from rich.progress import Progress, SpinnerColumn, TextColumn
from rich.table import Table

from spikeforge import __version__
from spikeforge.converter import (calibrate, convert, dump_distributions, dump_spike_levels,
                                  load_converted, load_profile, save_converted, save_profile,
                                  save_tune_result, snn_accuracy, tune_lambda)
from spikeforge.energy import energy_aware_metric, evaluate_snn, fire_ablation, sweep_lambda, sweep_p
from spikeforge.equivalence import (SWEEP_KINDS, bound_trend, check_theorem2, replicate_input, run_sweep,
                                    sweep_T, trace_case)
from spikeforge.errors import ConfigError, SpikeForgeError, VerificationFailed
from spikeforge.tensor_net import ann_accuracy, dump_activations, load_dataset, load_network
from spikeforge.toy import write_toy_fixture
from utils.config import ConfigManager, SpikeForgeConfig
from utils.io import write_csv, write_yaml
from utils.logger import get_logger, setup_logger

console = Console()
logger = get_logger('cli')

COMMANDS = ('verify-theorems', 'calibrate', 'convert', 'tune-lambda', 'eval', 'energy', 'sweep-T',
            'sweep-lambda', 'sweep-p', 'fire-ablation', 'dump-distributions', 'replay', 'make-fixture')

REQUIRED_FLAGS = {
    'verify-theorems': (),
    'calibrate': ('network', 'data', 'out'),
    'convert': ('network', 'calib', 'out'),
    'tune-lambda': ('network', 'calib', 'data'),
    'eval': ('model', 'data'),
    'energy': ('model', 'data'),
    'sweep-T': ('network', 'data', 'out'),
    'sweep-lambda': ('network', 'calib', 'data', 'out'),
    'sweep-p': ('network', 'data', 'out'),
    'fire-ablation': ('network', 'calib', 'data', 'out'),
    'dump-distributions': ('out',),
    'replay': ('case',),
    'make-fixture': ('out',),
}

INPUT_FLAGS = ('network', 'data', 'calib', 'model')

FLAG_NAMES = {'lambda_': '--lambda', 'lambda': '--lambda', 'energy_weight': '--energy-weight'}

THEOREM2_T_VALUES = (1, 2, 4, 8, 16)


class RunConfig(BaseModel):
    """一次命令运行的全部参数（命令行优先，缺省取配置文件）"""
    model_config = ConfigDict(extra='forbid', populate_by_name=True)

    command: Literal[COMMANDS]
    seed: int
    network: Optional[str] = None
    data: Optional[str] = None
    calib: Optional[str] = None
    model: Optional[str] = None
    report: Optional[str] = None
    out: Optional[str] = None
    p: float = Field(gt=0, le=50)
    lambda_: float = Field(gt=0, le=1, alias='lambda')
    M: int = Field(ge=1, le=20)
    T: int = Field(ge=1)
    trials: int = Field(ge=1)
    steps: int = Field(ge=1)
    fraction: float = Field(gt=0, le=1)
    fire: Literal['sformer', 'linear', 'exponential']
    energy_weight: float = Field(ge=0)
    case: Optional[int] = Field(None, ge=0)
    kind: Literal[SWEEP_KINDS] = 'theorem1'
    raw: bool = False

    @classmethod
    def from_args(cls, args: argparse.Namespace, config: SpikeForgeConfig) -> 'RunConfig':
        command = args.command

        def pick(value, default):
            return default if value is None else value

        if command == 'verify-theorems':
            trials_default = config.verification.trials
        else:
            trials_default = config.tuning.trials
        fraction_default = config.tuning.fraction if command == 'tune-lambda' else config.calibration.fraction

        values = {
            'command': command,
            'seed': ConfigManager.resolve_seed(args.seed, config),
            'network': args.network, 'data': args.data, 'calib': args.calib, 'model': args.model,
            'report': args.report, 'out': args.out,
            'p': pick(args.p, config.calibration.p),
            'lambda': pick(args.lambda_, config.conversion.lambda_),
            'M': pick(args.M, config.conversion.M),
            'T': pick(args.T, config.sweeps.T_max),
            'trials': pick(args.trials, trials_default),
            'steps': pick(args.steps, config.sweeps.lambda_steps),
            'fraction': pick(args.fraction, fraction_default),
            'fire': pick(args.fire, config.conversion.fire_function),
            'energy_weight': pick(args.energy_weight, config.tuning.energy_weight),
            'case': args.case,
            'kind': pick(args.kind, 'theorem1'),
            'raw': args.raw,
        }
        try:
            run = cls.model_validate(values)
        except ValidationError as e:
            first = e.errors()[0]
            name = str(first['loc'][0]) if first['loc'] else 'command'
            flag = FLAG_NAMES.get(name, f"--{name}")
            raise ConfigError(f"参数 {flag} 无效: {first['msg']}", flag=flag) from e
        run.check_required()
        return run

    def check_required(self):
        """在做任何工作之前检查必需参数与输入文件"""
        for name in REQUIRED_FLAGS[self.command]:
            if getattr(self, name) is None:
                raise ConfigError(f"命令 {self.command} 缺少必需参数 --{name}", flag=f"--{name}")
        if self.command == 'tune-lambda' and self.trials < 2:
            raise ConfigError("tune-lambda 要求 --trials ≥ 2", flag='--trials')
        if self.command == 'dump-distributions' and self.calib is None and \
                (self.network is None or self.data is None):
            raise ConfigError("dump-distributions 需要 --calib，或同时提供 --network 与 --data",
                              flag='--calib')
        for name in INPUT_FLAGS:
            path = getattr(self, name)
            if path is not None and not os.path.exists(path):
                raise ConfigError(f"文件不存在: {path}", flag=f"--{name}")


class _ArgumentParser(argparse.ArgumentParser):
    """参数错误统一转成 ConfigError（退出码 1）"""

    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    files = common.add_argument_group('文件')
    files.add_argument('--network', help='网络描述文件 (YAML)')
    files.add_argument('--data', help='样本 CSV: sample_id,feature…[,label]')
    files.add_argument('--calib', help='校准结果文件 (YAML)')
    files.add_argument('--model', help='转换后的模型文件 (YAML)')
    files.add_argument('--report', help='报告输出路径 (YAML)')
    files.add_argument('--out', help='输出路径')
    files.add_argument('--config', help='配置文件 (YAML)')

    numbers = common.add_argument_group('数值参数')
    numbers.add_argument('--p', type=float, help='百分位归一化参数，(0, 50]')
    numbers.add_argument('--lambda', dest='lambda_', type=float, help='缩放因子 λ ∈ (0, 1]')
    numbers.add_argument('--M', type=int, help='SFormer 发放函数参数 M')
    numbers.add_argument('--T', type=int, help='T 扫描上限（取不超过它的 2 的幂）')
    numbers.add_argument('--trials', type=int, help='校验用例数 / 调参试验数')
    numbers.add_argument('--steps', type=int, help='λ 扫描步数')
    numbers.add_argument('--seed', type=int, help='随机种子（缺省读取 SPIKEFORGE_SEED）')
    numbers.add_argument('--fraction', type=float, help='校准 / 调参子样本比例')
    numbers.add_argument('--fire', choices=['sformer', 'linear', 'exponential'], help='发放函数')
    numbers.add_argument('--energy-weight', dest='energy_weight', type=float, help='调参目标中的能耗权重')
    numbers.add_argument('--case', type=int, help='replay 的用例编号')
    numbers.add_argument('--kind', choices=list(SWEEP_KINDS), help='replay 的用例类型')
    numbers.add_argument('--raw', action='store_true', help='导出原始激活而不是直方图')

    parser = _ArgumentParser(
        prog='spikeforge',
        description='SpikeForge - 单时间步 ANN→SNN 转换与等价定理校验',
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
示例用法:
  python main.py verify-theorems --trials 10000 --seed 7 --report r.yaml
  python main.py calibrate --network net.yaml --data train.csv --out profile.yaml
  python main.py tune-lambda --network net.yaml --calib profile.yaml --data train.csv --out model.yaml
  python main.py sweep-lambda --network net.yaml --calib profile.yaml --data test.csv --steps 40 --out lambda.csv
  python main.py make-fixture --out fixtures/toy_mlp --seed 0
        """,
    )
    parser.add_argument('--version', action='version', version=f'SpikeForge v{__version__}')
    subparsers = parser.add_subparsers(dest='command', help='可用命令')
    helps = {
        'verify-theorems': '运行等价定理的随机校验',
        'calibrate': '统计神经元槽激活并确定阈值',
        'convert': '按给定 λ 转换网络',
        'tune-lambda': '贝叶斯优化搜索 λ',
        'eval': '评估转换后模型的准确率',
        'energy': '统计运算次数与能耗比',
        'sweep-T': '多时间步 IF 与单步 MTN 对比扫描',
        'sweep-lambda': 'λ 扫描（准确率 / 能耗比）',
        'sweep-p': '百分位 p 扫描',
        'fire-ablation': '发放函数与缩放策略消融',
        'dump-distributions': '导出激活 / 发放分布',
        'replay': '复现单个校验用例的逐步轨迹',
        'make-fixture': '训练玩具 MLP 并导出网络与样本集',
    }
    for command in COMMANDS:
        subparsers.add_parser(command, parents=[common], help=helps[command])
    return parser


def _powers_of_two(limit: int) -> List[int]:
    values, t = [], 1
    while t <= limit:
        values.append(t)
        t *= 2
    return values


class SpikeForgeRunner:
    """按 RunConfig 执行一条命令"""

    def __init__(self, config: SpikeForgeConfig, run: RunConfig):
        self.config = config
        self.run_config = run

    def run(self) -> int:
        handler = getattr(self, f"cmd_{self.run_config.command.replace('-', '_')}")
        return handler()

    # ---------- 通用 ----------

    def _progress(self) -> Progress:
        return Progress(SpinnerColumn(), TextColumn("[progress.description]{task.description}"), console=console)

    def _load_profile(self, net, data=None):
        r = self.run_config
        if r.calib is not None:
            return load_profile(r.calib)
        return calibrate(net, data.subsample(r.fraction, r.seed), r.p,
                         self.config.calibration.histogram_bins, self.config.calibration.workers)

    def _write_rows(self, rows: List[Dict], columns: Sequence[str]):
        write_csv(rows, self.run_config.out, columns=list(columns))
        console.print(f"✅ 已写入 {len(rows)} 行: [cyan]{escape(self.run_config.out)}[/cyan]")

    def _print_rows(self, title: str, rows: List[Dict], columns: Sequence[str]):
        table = Table(title=title)
        for column in columns:
            table.add_column(column, style='cyan' if column == columns[0] else None)
        for row in rows:
            table.add_row(*[f"{row[c]:.6g}" if isinstance(row[c], float) else str(row[c]) for c in columns])
        console.print(table)

    # ---------- 命令 ----------

    def cmd_verify_theorems(self) -> int:
        r, v = self.run_config, self.config.verification
        suites = {}
        with self._progress() as progress:
            for kind in SWEEP_KINDS:
                n = min(r.trials, 1000) if kind == 'eq5' else r.trials
                task = progress.add_task(f"校验 {kind} ({n} 个用例)...", total=None)
                suites[kind] = run_sweep(kind, n, r.seed, v.max_T, v.dyadic_bits)
                progress.remove_task(task)
            task = progress.add_task("误差界随 T 的趋势...", total=None)
            trend = bound_trend(r.seed, min(r.trials, 1000), v.trend_T, v.dyadic_bits)
            progress.remove_task(task)

        trend_values = [trend[t] for t in sorted(trend)]
        trend_ok = len(trend_values) < 2 or trend_values[-1] < trend_values[0]

        theorem2 = None
        if r.network is not None:
            theorem2 = self._verify_network(r.network)

        failing = next((s for s in suites.values() if not s.passed), None)
        worst = failing or suites['theorem1']
        worst_case_id = failing.errors[0]['case_id'] if failing else worst.worst_case_id
        n_cases = sum(s.n_cases for s in suites.values())
        n_passed = sum(s.n_passed for s in suites.values())
        report = {
            'n_cases': n_cases,
            'n_passed': n_passed,
            'max_discrepancy': suites['theorem1'].max_discrepancy,
            'worst_case_seed': r.seed,
            'worst_case_id': worst_case_id,
            'worst_case_kind': worst.kind,
            'suites': {kind: s.get_report() for kind, s in suites.items()},
            'bound_trend': {int(t): float(d) for t, d in trend.items()},
            'bound_trend_decreasing': trend_ok,
        }
        if theorem2 is not None:
            report['theorem2'] = theorem2

        table = Table(title="🧪 等价定理校验")
        table.add_column("校验项", style="cyan")
        table.add_column("通过 / 总数")
        table.add_column("最大差异")
        for kind, s in suites.items():
            status = "green" if s.passed else "red"
            table.add_row(kind, f"[{status}]{s.n_passed}/{s.n_cases}[/{status}]", f"{s.max_discrepancy:.3e}")
        table.add_row("bound trend", "✅" if trend_ok else "❌",
                      ", ".join(f"T={t}: {d:.3e}" for t, d in sorted(trend.items())))
        if theorem2 is not None:
            table.add_row("network", "✅" if theorem2['passed'] else "❌", f"{theorem2['max_deviation']:.3e}")
        console.print(table)

        if r.report:
            write_yaml(report, r.report)
            console.print(f"📄 报告已写入: [cyan]{escape(r.report)}[/cyan]")

        network_ok = theorem2 is None or theorem2['passed']
        if failing:
            raise VerificationFailed(f"{failing.kind} 校验失败", seed=r.seed, case_id=worst_case_id, kind=failing.kind)
        if not trend_ok:
            # 趋势没有单个失败用例，复现差异最大的双分支用例
            raise VerificationFailed("theorem3 误差界没有随 T 减小", seed=r.seed,
                                     case_id=suites['theorem3'].worst_case_id or 0, kind='theorem3')
        if not network_ok:
            raise VerificationFailed("网络级等价校验失败", seed=r.seed, case_id=0, kind='network')
        console.print("🎉 [green]所有校验通过[/green]")
        return 0

    def _verify_network(self, path: str) -> Dict:
        """在给定线性网络上检查网络级等价（随机二进制小数常数输入）"""
        r = self.run_config
        net = load_network(path)
        rng = np.random.default_rng(r.seed)
        cases = []
        for T in THEOREM2_T_VALUES:
            x = rng.integers(0, 2 ** 20 + 1, size=net.input_dim) / 2 ** 20
            equal, report = check_theorem2(net, replicate_input(x, T), T,
                                           tol=self.config.verification.network_tolerance)
            cases.append({'T': T, 'equal': equal, 'max_deviation': report.max_deviation,
                          'preconditions_hold': report.preconditions_hold})
        passed = all(c['equal'] or not c['preconditions_hold'] for c in cases)
        return {'passed': passed, 'max_deviation': max(c['max_deviation'] for c in cases), 'cases': cases}

    def cmd_replay(self) -> int:
        r, v = self.run_config, self.config.verification
        trace = trace_case(r.kind, r.seed, r.case, v.max_T, v.dyadic_bits)
        steps = trace['steps']
        table = Table(title=f"🔁 {r.kind} seed={r.seed} case={r.case} T={trace['T']}")
        for column in steps[0]:
            table.add_column(column, style='cyan' if column == 't' else None)
        for step in steps:
            table.add_row(*[str(value) for value in step.values()])
        console.print(table)
        for key, value in trace.items():
            if key not in ('steps', 'kind'):
                console.print(f"  {key}: {value}")
        return 0

    def cmd_calibrate(self) -> int:
        r = self.run_config
        net = load_network(r.network)
        data = load_dataset(r.data)
        profile = self._load_profile(net, data)
        save_profile(profile, r.out)
        table = Table(title=f"📏 校准结果 (p={profile.p}, 样本 {profile.n_samples})")
        for column in ("神经元槽", "θ⁺", "θ⁻", "softmax_max"):
            table.add_column(column)
        for sid, entry in profile.slots.items():
            table.add_row(sid, str(entry.theta_pos), str(entry.theta_neg), str(entry.softmax_max))
        console.print(table)
        console.print(f"✅ 校准结果已写入: [cyan]{escape(r.out)}[/cyan]")
        return 0

    def cmd_convert(self) -> int:
        r = self.run_config
        cnet = convert(load_network(r.network), load_profile(r.calib), r.lambda_, r.M, r.fire)
        save_converted(cnet, r.out)
        console.print(f"✅ 已转换 {len(cnet.bindings)} 个神经元槽 (λ={r.lambda_}, M={r.M}): "
                      f"[cyan]{escape(r.out)}[/cyan]")
        return 0

    def cmd_tune_lambda(self) -> int:
        r, t = self.run_config, self.config.tuning
        net = load_network(r.network)
        profile = load_profile(r.calib)
        val = load_dataset(r.data).subsample(r.fraction, r.seed)
        if t.objective == 'accuracy' or r.energy_weight == 0:
            metric = snn_accuracy
        else:
            metric = energy_aware_metric(r.energy_weight)
        with self._progress() as progress:
            progress.add_task(f"搜索 λ ({r.trials} 次试验)...", total=None)
            result = tune_lambda(net, profile, val, metric, trials=r.trials, seed=r.seed, M=r.M, fire=r.fire,
                                 init_points=t.init_points, xi=t.xi)
        console.print(f"🎯 λ* = [bold green]{result.lambda_star:.6f}[/bold green] (score={result.best_score:.6f})")
        if r.report:
            save_tune_result(result, r.report)
        if r.out:
            save_converted(convert(net, profile, result.lambda_star, r.M, r.fire), r.out)
            console.print(f"✅ 转换模型已写入: [cyan]{escape(r.out)}[/cyan]")
        return 0

    def cmd_eval(self) -> int:
        r = self.run_config
        cnet = load_converted(r.model)
        data = load_dataset(r.data)
        evaluation = evaluate_snn(cnet, data)
        ann = ann_accuracy(cnet.base, data)
        table = Table(title="📊 评估结果")
        table.add_column("指标", style="cyan")
        table.add_column("数值")
        table.add_row("ANN 准确率", f"{ann:.4f}")
        table.add_row("SNN 准确率 (T=1)", f"{evaluation.accuracy:.4f}")
        table.add_row("样本数", str(len(data)))
        console.print(table)
        if r.report:
            write_yaml({'ann_accuracy': ann, 'snn_accuracy': evaluation.accuracy, 'n_samples': len(data),
                        'lambda': cnet.lambda_}, r.report)
        return 0

    def cmd_energy(self) -> int:
        r, e = self.run_config, self.config.energy
        cnet = load_converted(r.model)
        data = load_dataset(r.data)
        report = evaluate_snn(cnet, data).energy_report(e.e_ac, e.e_mac).get_report()
        table = Table(title="⚡ 能耗统计")
        table.add_column("项目", style="cyan")
        table.add_column("数值")
        for key in ('ac_snn', 'mac_snn', 'mac_ann', 'neuron_updates', 'layer_passes', 'ratio', 'full_ratio'):
            table.add_row(key, str(report[key]))
        console.print(table)
        if r.report:
            write_yaml(report, r.report)
        return 0

    def cmd_sweep_T(self) -> int:
        r, s = self.run_config, self.config.sweeps
        net = load_network(r.network)
        data = load_dataset(r.data)
        profile = self._load_profile(net, data)
        with self._progress() as progress:
            progress.add_task("T 扫描...", total=None)
            rows = sweep_T(net, data, profile, _powers_of_two(r.T), s.seeds, s.v0_fraction)
        rows = [asdict(row) for row in rows]
        columns = ['T', 'acc_if', 'acc_mtn', 'mean_disc', 'max_disc']
        self._print_rows("⏱️ T 扫描", rows, columns)
        self._write_rows(rows, columns)
        return 0

    def cmd_sweep_lambda(self) -> int:
        r = self.run_config
        net = load_network(r.network)
        with self._progress() as progress:
            progress.add_task(f"λ 扫描 ({r.steps} 步)...", total=None)
            rows = sweep_lambda(net, load_profile(r.calib), load_dataset(r.data), r.steps, r.M, r.fire)
        self._write_rows(rows, ['lambda', 'accuracy', 'energy_ratio'])
        return 0

    def cmd_sweep_p(self) -> int:
        r = self.run_config
        net = load_network(r.network)
        data = load_dataset(r.data)
        with self._progress() as progress:
            progress.add_task("p 扫描...", total=None)
            rows = sweep_p(net, data.subsample(r.fraction, r.seed), data, self.config.sweeps.p_values,
                           r.lambda_, r.M, r.fire)
        columns = ['p', 'accuracy', 'energy_ratio']
        self._print_rows("📐 p 扫描", rows, columns)
        self._write_rows(rows, columns)
        return 0

    def cmd_fire_ablation(self) -> int:
        r = self.run_config
        rows = fire_ablation(load_network(r.network), load_profile(r.calib), load_dataset(r.data), r.lambda_, r.M)
        columns = ['fire_function', 'scaling', 'lambda', 'accuracy', 'energy_ratio']
        self._print_rows("🔬 发放函数消融", rows, columns)
        self._write_rows(rows, columns)
        return 0

    def cmd_dump_distributions(self) -> int:
        r = self.run_config
        if r.raw:
            if r.network is None or r.data is None:
                raise ConfigError("--raw 需要 --network 与 --data", flag='--raw')
            dump_activations(load_network(r.network), load_dataset(r.data), r.out)
            console.print(f"✅ 原始激活已写入: [cyan]{escape(r.out)}[/cyan]")
            return 0

        net = load_network(r.network) if r.network else None
        data = load_dataset(r.data) if r.data else None
        profile = self._load_profile(net, data)
        dump_distributions(profile, r.out)
        console.print(f"✅ 激活直方图已写入: [cyan]{escape(r.out)}[/cyan]")
        if net is not None and data is not None:
            out = Path(r.out)
            spikes_path = out.with_name(f"{out.stem}_spikes{out.suffix or '.csv'}")
            dump_spike_levels(net, profile, data, self.config.sweeps.spike_lambdas, r.M, spikes_path, r.fire)
            console.print(f"✅ 发放等级分布已写入: [cyan]{escape(str(spikes_path))}[/cyan]")
        return 0

    def cmd_make_fixture(self) -> int:
        r = self.run_config
        with self._progress() as progress:
            progress.add_task("训练玩具网络...", total=None)
            fixture = write_toy_fixture(r.out, r.seed)
        console.print(f"✅ 玩具网络与样本已写入: [cyan]{escape(r.out)}[/cyan] "
                      f"(测试集 ANN 准确率 {ann_accuracy(fixture.net, fixture.test):.4f})")
        return 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    """命令行入口，返回退出码"""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help()
            return 1
        config = ConfigManager.load_config(args.config)
        setup_logger(config.logging.level, config.logging.log_dir, config.logging.json_log)
        run = RunConfig.from_args(args, config)
        return SpikeForgeRunner(config, run).run()
    except VerificationFailed as e:
        console.print(f"❌ [red]{escape(str(e))}[/red]")
        if e.kind in SWEEP_KINDS:
            console.print(f"🔁 复现: [bold]python main.py replay --kind {e.kind} --seed {e.seed} --case {e.case_id}[/bold]")
        return 2
    except ConfigError as e:
        console.print(f"❌ [red]参数错误: {escape(str(e))}[/red]")
        return 1
    except (SpikeForgeError, FileNotFoundError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        console.print(f"❌ [red]{escape(str(e))}[/red]")
        return 1
