# main.py — CLI-интерфейс для NexusSim

import sys
from pathlib import Path

# Добавляем путь к проекту NexusSim в sys.path,
# чтобы Python мог найти модуль nexus_sim
project_root = Path(__file__).parent
nexus_sim_path = project_root / 'NexusSim'
if str(nexus_sim_path) not in sys.path:
    sys.path.insert(0, str(nexus_sim_path))

import argparse
import logging

from nexus_sim.config import load_config
from nexus_sim.domain import ConfigError, NexusSimError, SimulationTimeout
from nexus_sim.logger import setup_logging
from nexus_sim.main import (EXIT_CONFIG, EXIT_OK, EXIT_TIMEOUT, ExperimentRunner, calibrate_import,
                            parse_rates)

logger = logging.getLogger("nexus_sim.cli")


def add_common_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument('--config', type=Path, help="YAML-файл конфигурации (флаги имеют приоритет над ним).")
    parser.add_argument('--model', help="Пресет модели: 3b-like, 8b-like, 14b-like.")
    parser.add_argument('--gpu', help="Пресет GPU (по умолчанию l20-like).")
    parser.add_argument('--workload', help="Пресет нагрузки: long-data, arxiv, sharegpt, mixed, kv-pressure, long-prompt.")
    parser.add_argument('--trace', type=Path, help="Файл трассы вместо генерации по пресету.")
    parser.add_argument('--num-requests', type=int, help="Число запросов в трассе.")
    parser.add_argument('--duration', type=float, help="Длительность трассы в секундах (вместо --num-requests).")
    parser.add_argument('--seed', type=int, help="Единое зерно для всей случайности.")
    parser.add_argument('--offline', action='store_true', default=None,
                        help="Офлайн-режим: все запросы поданы в момент 0, измеряется makespan.")
    parser.add_argument('--output-dir', type=Path, help="Папка для файлов результатов.")
    parser.add_argument('--log-level', help="Уровень логирования: DEBUG, INFO, WARNING.")
    parser.add_argument('--log-file', type=Path, help="Файл журнала.")
    parser.add_argument('--alpha', type=float, help="Допуск на замедление префилла, когда оптимизируется декод.")
    parser.add_argument('--beta', type=float, help="Допуск на замедление декода, когда оптимизируется префилл.")
    parser.add_argument('--delta', type=int, help="Ширина буферной зоны переключения разбиения, в процентах SM.")
    parser.add_argument('--gamma', type=float, help="Поправка SPF на возраст запроса, токенов в секунду.")
    parser.add_argument('--token-budget', type=int, help="Бюджет токенов пакета префилла.")
    parser.add_argument('--chunk-size', type=int, help="Размер чанка длинного промпта.")
    parser.add_argument('--skip-nonfitting', action='store_true', default=None,
                        help="SPF продолжает обход после запроса, не влезшего в бюджет.")
    parser.add_argument('--no-contention', action='store_true',
                        help="Отключить модель конкуренции за пропускную способность памяти.")


def collect_overrides(args: argparse.Namespace) -> dict:
    """Флаги командной строки в виде слоя конфигурации; незаданные флаги не перекрывают файл."""
    mapping = {
        'model': ('model', 'preset'),
        'gpu': ('gpu', 'preset'),
        'workload': ('workload', 'preset'),
        'trace': ('workload', 'trace'),
        'num_requests': ('workload', 'num_requests'),
        'duration': ('workload', 'duration_s'),
        'seed': ('workload', 'seed'),
        'offline': ('workload', 'offline'),
        'rate': ('workload', 'rate_rps'),
        'output_dir': ('output', 'dir'),
        'log_level': ('output', 'log_level'),
        'log_file': ('output', 'log_file'),
        'alpha': ('controller', 'alpha'),
        'beta': ('controller', 'beta'),
        'delta': ('controller', 'delta'),
        'gamma': ('controller', 'gamma'),
        'token_budget': ('controller', 'token_budget'),
        'chunk_size': ('controller', 'chunk_size'),
        'skip_nonfitting': ('controller', 'skip_nonfitting'),
    }
    overrides: dict = {}
    for attr, (section, key) in mapping.items():
        value = getattr(args, attr, None)
        if value is not None:
            overrides.setdefault(section, {})[key] = str(value) if isinstance(value, Path) else value
    if getattr(args, 'duration', None) is not None:
        overrides['workload']['num_requests'] = None
    if getattr(args, 'no_contention', False):
        overrides.setdefault('simulator', {})['contention'] = False
    engines = getattr(args, 'engines', None) or getattr(args, 'engine', None)
    if engines:
        overrides.setdefault('simulator', {})['engines'] = [e.strip() for e in engines.split(',') if e.strip()]
    return overrides


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description="NexusSim: симулятор дезагрегации префилла и декода внутри одного GPU.")
    sub = parser.add_subparsers(dest='command', required=True)

    run_p = sub.add_parser('run', help="Прогон одного движка.")
    run_p.add_argument('--engine', default='nexus',
                       help="nexus, nexus+fcfs, static:<r_p>, static:<r_p>+fcfs, monolithic, engine-disagg.")
    run_p.add_argument('--rate', type=float, help="Интенсивность пуассоновского потока, запросов в секунду.")

    cmp_p = sub.add_parser('compare', help="Сравнение движков на одной и той же трассе.")
    cmp_p.add_argument('--engines', help="Список движков через запятую.")
    cmp_p.add_argument('--rate', type=float, help="Интенсивность пуассоновского потока, запросов в секунду.")

    sweep_p = sub.add_parser('sweep', help="Развёртка по интенсивности нагрузки.")
    sweep_p.add_argument('--engines', help="Список движков через запятую.")
    sweep_p.add_argument('--rate', dest='rates', default='1..6', help="Диапазон 'lo..hi' или список через запятую.")
    sweep_p.add_argument('--step', type=float, default=0.5, help="Шаг диапазона нагрузок.")
    sweep_p.add_argument('--jobs', type=int, default=1, help="Число параллельных процессов.")

    gen_p = sub.add_parser('gen-trace', help="Сгенерировать файл трассы.")
    gen_p.add_argument('--out', type=Path, required=True, help="Путь к файлу трассы.")
    gen_p.add_argument('--rate', type=float, help="Интенсивность пуассоновского потока, запросов в секунду.")

    cal_p = sub.add_parser('calibrate-import', help="Импорт профиля насыщения ядер (op,r_sat,lambda).")
    cal_p.add_argument('path', type=Path, help="Файл калибровки.")
    cal_p.add_argument('--write-config', type=Path, help="YAML-конфигурация, в которую записать профиль.")

    replay_p = sub.add_parser('replay', help="Пересчитать метрики по журналу событий.")
    replay_p.add_argument('event_log', type=Path, help="Файл events.jsonl.")
    replay_p.add_argument('--check-latencies', action='store_true',
                          help="Пересчитать латентность каждого пакета моделью стоимости.")

    for p in (run_p, cmp_p, sweep_p, gen_p, cal_p, replay_p):
        add_common_arguments(p)
    return parser


def main(argv=None) -> int:
    """
    Главная функция CLI. Возвращает код завершения.
    """
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging()

    try:
        if args.command == 'calibrate-import':
            calibrate_import(args.path, args.write_config)
            return EXIT_OK

        run_cfg = load_config(args.config, collect_overrides(args))
        setup_logging(run_cfg.log_file, run_cfg.log_level)
        runner = ExperimentRunner(run_cfg)

        if args.command in ('run', 'compare'):
            return runner.run_experiment()
        if args.command == 'sweep':
            return runner.sweep(parse_rates(args.rates, args.step), jobs=args.jobs)
        if args.command == 'gen-trace':
            trace = runner.gen_trace(args.out)
            print(f"Записано {len(trace)} запросов в {args.out}")
            return EXIT_OK
        if args.command == 'replay':
            report = runner.replay(args.event_log, args.check_latencies)
            return EXIT_OK if report is not None else EXIT_CONFIG
    except ConfigError as e:
        for violation in e.violations:
            logger.error(f"Ошибка конфигурации: {violation}")
        return EXIT_CONFIG
    except SimulationTimeout as e:
        logger.error(f"Таймаут симуляции: {e}")
        return EXIT_TIMEOUT
    except (NexusSimError, ValueError, OSError) as e:
        logger.error(f"{type(e).__name__}: {e}")
        return EXIT_CONFIG
    return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
