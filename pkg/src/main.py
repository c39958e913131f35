#!/usr/bin/env python3
"""
SpikeForge - 单时间步 ANN→SNN 转换工具
主程序入口文件
"""

import sys

from rich.console import Console
from rich.panel import Panel
from rich.text import Text

from spikeforge import __version__
from spikeforge.cli import main as cli_main

console = Console()


def show_banner():
    """显示项目横幅"""
    banner_text = Text()
    banner_text.append(f"SpikeForge v{__version__}", style="bold blue")
    banner_text.append("\n单时间步 ANN→SNN 转换", style="cyan")
    banner_text.append("\n缩放发放神经元 · 时空等价校验", style="green")

    panel = Panel(
        banner_text,
        title="⚡ 欢迎使用",
        border_style="blue",
        padding=(1, 2)
    )
    console.print(panel)


def main(argv=None) -> int:
    """主函数"""
    argv = sys.argv[1:] if argv is None else argv
    if not argv:
        show_banner()
        console.print("\n🎯 [bold]使用 --help 查看所有命令[/bold]")
        console.print("\n📚 [bold cyan]快速开始:[/bold cyan]")
        console.print("• 定理校验: [dim]python main.py verify-theorems --trials 10000 --seed 7[/dim]")
        console.print("• 校准阈值: [dim]python main.py calibrate --network net.yaml --data train.csv --out profile.yaml[/dim]")
        console.print("• 搜索 λ:   [dim]python main.py tune-lambda --network net.yaml --calib profile.yaml --data train.csv[/dim]")
        return 0
    return cli_main(argv)


if __name__ == "__main__":
    try:
        sys.exit(main())
    except KeyboardInterrupt:
        console.print("\n\n👋 [yellow]感谢使用 SpikeForge！[/yellow]")
        sys.exit(0)
    except Exception as e:
        console.print(f"\n❌ [red]发生错误: {e}[/red]")
        sys.exit(1)
