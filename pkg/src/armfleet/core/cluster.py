"""Desk-scale cluster orchestration: config parsing, worker spawning, teardown.

Cluster files reuse the vocabulary of container orchestration manifests
(``spec.replicas`` and container ``resources.limits``). Resource limits are
parsed and echoed but not enforced.
"""

import socket
import subprocess
import sys
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Literal, cast

import yaml
from rich.console import Console

from armfleet.core.channel import (
    ChannelClosedError,
    SocketChannel,
    parse_address,
    queue_channel_pair,
)
from armfleet.core.errors import ArmfleetError, ConfigError
from armfleet.core.ppo import PpoConfig
from armfleet.core.protocol import (
    ProtocolError,
    assign_config_frame,
    check_error,
    parse_ack,
    parse_hello,
    shutdown_frame,
)
from armfleet.core.reacher_env import ReacherEnvSpec
from armfleet.core.worker import run_worker_session
from armfleet.types import AssignConfigPayload, Channel, WorkerExitRecord

console = Console(stderr=True)

ClusterMode = Literal["in-process", "local-processes", "remote"]
CLUSTER_MODES: tuple[ClusterMode, ...] = ("in-process", "local-processes", "remote")
MAX_WORKERS_PER_REPLICA = 4


def parse_mode(value: str) -> ClusterMode:
    for mode in CLUSTER_MODES:
        if value == mode:
            return mode
    raise ConfigError(f"mode must be one of {', '.join(CLUSTER_MODES)} (got {value!r})")


_KNOWN_TOP_KEYS = {
    "apiVersion",
    "kind",
    "metadata",
    "spec",
    "replicas",
    "workers_per_replica",
    "listen_address",
    "mode",
    "image",
    "resources",
}
_KNOWN_SPEC_KEYS = {
    "replicas",
    "template",
    "selector",
    "workers_per_replica",
    "listen_address",
    "mode",
}


class SpawnError(ArmfleetError):
    """Workers could not be started or did not register in time."""


@dataclass(frozen=True)
class ClusterConfig:
    """Replica layout and transport mode of a training cluster."""

    replicas: int
    workers_per_replica: int = 1
    cpu_limit: str | None = None
    memory_limit: str | None = None
    cpu_request: str | None = None
    memory_request: str | None = None
    listen_address: str = "127.0.0.1:0"
    mode: ClusterMode = "in-process"

    def __post_init__(self) -> None:
        if self.replicas < 1:
            raise ConfigError(f"replicas must be >= 1 (got {self.replicas})")
        if not 1 <= self.workers_per_replica <= MAX_WORKERS_PER_REPLICA:
            raise ConfigError(
                f"workers_per_replica must be between 1 and {MAX_WORKERS_PER_REPLICA} "
                f"(got {self.workers_per_replica}); a machine hosts at most "
                f"{MAX_WORKERS_PER_REPLICA} workers"
            )
        if self.mode not in CLUSTER_MODES:
            raise ConfigError(
                f"mode must be one of {', '.join(CLUSTER_MODES)} (got {self.mode!r})"
            )
        parse_address(self.listen_address)

    @property
    def total_workers(self) -> int:
        return self.replicas * self.workers_per_replica

    def describe(self) -> str:
        limits = ", ".join(
            f"{name} {value}"
            for name, value in (("cpu", self.cpu_limit), ("memory", self.memory_limit))
            if value
        )
        text = (
            f"{self.total_workers} workers ({self.replicas} x {self.workers_per_replica}), "
            f"mode {self.mode}"
        )
        return f"{text}, limits {limits} (not enforced)" if limits else text


def _warn_unknown(keys: set[str], known: set[str], where: str) -> None:
    for key in sorted(keys - known):
        console.print(f"[yellow]⚠ Ignoring unknown cluster key '{where}{key}'[/yellow]")


def _container_resources(template: Any) -> dict[str, Any]:
    try:
        containers = template["spec"]["containers"]
        return cast(dict[str, Any], containers[0].get("resources") or {})
    except (KeyError, IndexError, TypeError, AttributeError):
        return {}


def _text(value: Any) -> str | None:
    return None if value is None else str(value)


def parse_cluster_config(text: str) -> ClusterConfig:
    """Parse a cluster file, either manifest-shaped or flat.

    Raises:
        ConfigError: If replicas is missing or a value is invalid.
    """
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError(f"Cluster config is not valid YAML: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError("Cluster config must be a key-value mapping")
    top = cast(dict[str, Any], data)
    _warn_unknown(set(top), _KNOWN_TOP_KEYS, "")

    spec = top.get("spec")
    if spec is not None:
        if not isinstance(spec, dict):
            raise ConfigError("'spec' must be a mapping")
        section = cast(dict[str, Any], spec)
        _warn_unknown(set(section), _KNOWN_SPEC_KEYS, "spec.")
        resources = _container_resources(section.get("template"))
    else:
        section = top
        resources = cast(dict[str, Any], top.get("resources") or {})

    def pick(key: str, default: Any = None) -> Any:
        return section.get(key, top.get(key, default))

    if pick("replicas") is None:
        raise ConfigError("Cluster config needs 'replicas'")
    limits = cast(dict[str, Any], resources.get("limits") or {})
    requests = cast(dict[str, Any], resources.get("requests") or {})
    try:
        return ClusterConfig(
            replicas=int(pick("replicas")),
            workers_per_replica=int(pick("workers_per_replica", 1)),
            cpu_limit=_text(limits.get("cpu")),
            memory_limit=_text(limits.get("memory")),
            cpu_request=_text(requests.get("cpu")),
            memory_request=_text(requests.get("memory")),
            listen_address=str(pick("listen_address", "127.0.0.1:0")),
            mode=cast(ClusterMode, str(pick("mode", "in-process"))),
        )
    except (TypeError, ValueError) as e:
        raise ConfigError(f"Invalid cluster config: {e}") from e


def load_cluster_config(path: str | Path) -> ClusterConfig:
    try:
        return parse_cluster_config(Path(path).read_text(encoding="utf-8"))
    except OSError as e:
        raise ConfigError(f"Cannot read cluster config {path}: {e}") from e


def cluster_config_for_workers(
    num_workers: int,
    mode: ClusterMode = "in-process",
    listen_address: str = "127.0.0.1:0",
) -> ClusterConfig:
    """Densest replica layout with exactly ``num_workers`` workers."""
    if num_workers < 1:
        raise ConfigError(f"num_workers must be >= 1 (got {num_workers})")
    per_replica = next(
        w for w in range(min(MAX_WORKERS_PER_REPLICA, num_workers), 0, -1) if num_workers % w == 0
    )
    return ClusterConfig(
        replicas=num_workers // per_replica,
        workers_per_replica=per_replica,
        listen_address=listen_address,
        mode=mode,
    )


@dataclass(frozen=True)
class SpawnArgs:
    """What every worker of a run is told during the handshake."""

    env_name: str
    env_spec: ReacherEnvSpec
    ppo_config: PpoConfig
    global_seed: int
    registration_timeout: float = 60.0
    worker_command: list[str] | None = None


class _WorkerThread(threading.Thread):
    """In-process worker; ``returncode`` mirrors ``Popen.returncode``."""

    def __init__(self, channel: Channel, worker_index: int, env_name: str):
        super().__init__(name=f"armfleet-worker-{worker_index}", daemon=True)
        self.channel = channel
        self.worker_index = worker_index
        self.env_name = env_name
        self.returncode: int | None = None

    def run(self) -> None:
        try:
            self.returncode = run_worker_session(self.channel, self.worker_index, self.env_name)
        except Exception as e:
            console.print(f"[red]✗ Worker thread {self.worker_index} crashed: {e}[/red]")
            self.returncode = 1


@dataclass
class WorkerHandle:
    worker_id: int
    channel: Channel
    pid: int | None = None
    process: "subprocess.Popen[bytes] | None" = None
    thread: _WorkerThread | None = None

    def is_alive(self) -> bool:
        if self.process is not None:
            return self.process.poll() is None
        if self.thread is not None:
            return self.thread.is_alive()
        return True

    @property
    def returncode(self) -> int | None:
        if self.process is not None:
            return self.process.poll()
        if self.thread is not None:
            return self.thread.returncode
        return None


@dataclass
class ClusterHandle:
    """Registered workers, ordered by id."""

    config: ClusterConfig
    workers: list[WorkerHandle]
    server: socket.socket | None = None
    exit_report: list[WorkerExitRecord] | None = field(default=None)

    @property
    def worker_ids(self) -> list[int]:
        return [w.worker_id for w in self.workers]

    @property
    def channels(self) -> dict[int, Channel]:
        return {w.worker_id: w.channel for w in self.workers}

    def __enter__(self) -> "ClusterHandle":
        return self

    def __exit__(self, *_: object) -> None:
        shutdown_cluster(self)


def _register(
    channel: Channel, taken: set[int], total: int, args: SpawnArgs, timeout: float
) -> int:
    """Coordinator side of Hello/AssignConfig/Ack; returns the assigned id."""
    hello = parse_hello(check_error(channel.receive(timeout=timeout)))
    hint = hello["worker_id_hint"]
    if hint is not None and 0 <= hint < total and hint not in taken:
        worker_id = hint
    else:
        worker_id = min(set(range(total)) - taken)
    if hello["env"] != args.env_name:
        console.print(
            f"[yellow]⚠ Worker {worker_id} declared env '{hello['env']}', "
            f"assigning '{args.env_name}'[/yellow]"
        )
    channel.send(
        assign_config_frame(
            AssignConfigPayload(
                worker_id=worker_id,
                env_spec=args.env_spec.to_dict(),
                ppo_config=args.ppo_config.to_dict(),
                global_seed=args.global_seed,
            )
        )
    )
    ack = parse_ack(check_error(channel.receive(timeout=timeout)))
    if ack["worker_id"] != worker_id:
        raise ProtocolError(
            f"Worker acknowledged id {ack['worker_id']}, expected {worker_id}", "handshake"
        )
    return worker_id


def _spawn_in_process(cfg: ClusterConfig, args: SpawnArgs) -> ClusterHandle:
    total = cfg.total_workers
    pending: list[tuple[Channel, _WorkerThread]] = []
    for index in range(total):
        coordinator_end, worker_end = queue_channel_pair()
        thread = _WorkerThread(worker_end, index, args.env_name)
        thread.start()
        pending.append((coordinator_end, thread))

    workers: list[WorkerHandle] = []
    taken: set[int] = set()
    for index, (channel, thread) in enumerate(pending):
        try:
            worker_id = _register(channel, taken, total, args, args.registration_timeout)
        except ArmfleetError as e:
            for other, _ in pending:
                other.close()
            raise SpawnError(f"Worker {index} failed to register: {e}", "register") from e
        taken.add(worker_id)
        workers.append(WorkerHandle(worker_id=worker_id, channel=channel, thread=thread))
    workers.sort(key=lambda w: w.worker_id)
    return ClusterHandle(config=cfg, workers=workers)


def _bind(cfg: ClusterConfig, backlog: int) -> socket.socket:
    host, port = parse_address(cfg.listen_address)
    server = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    server.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    try:
        server.bind((host, port))
    except OSError as e:
        server.close()
        raise SpawnError(f"Cannot listen on {cfg.listen_address}: {e}", "bind") from e
    server.listen(backlog)
    return server


def _worker_command(args: SpawnArgs, address: str, index: int) -> list[str]:
    base = args.worker_command or [sys.executable, "-m", "armfleet", "worker"]
    return [
        *base,
        "--connect",
        address,
        "--worker-id",
        str(index),
        "--env",
        args.env_name,
        "--seed",
        str(args.global_seed),
    ]


def _terminate(processes: dict[int, "subprocess.Popen[bytes]"], grace: float = 5.0) -> None:
    for process in processes.values():
        if process.poll() is None:
            process.terminate()
    for process in processes.values():
        try:
            process.wait(timeout=grace)
        except subprocess.TimeoutExpired:
            process.kill()
            process.wait()


def _accept_workers(
    server: socket.socket,
    cfg: ClusterConfig,
    args: SpawnArgs,
    processes: dict[int, "subprocess.Popen[bytes]"],
) -> list[WorkerHandle]:
    total = cfg.total_workers
    deadline = time.monotonic() + args.registration_timeout
    workers: list[WorkerHandle] = []
    taken: set[int] = set()
    while len(workers) < total:
        remaining = deadline - time.monotonic()
        exited = [i for i, p in processes.items() if p.poll() is not None and i not in taken]
        if remaining <= 0 or exited:
            missing = sorted(set(range(total)) - taken)
            detail = (
                f"worker(s) {exited} exited with codes "
                f"{[processes[i].returncode for i in exited]}"
                if exited
                else f"worker(s) {missing} did not register within {args.registration_timeout}s"
            )
            for w in workers:
                w.channel.close()
            raise SpawnError(f"Cluster start failed: {detail}", "register")
        server.settimeout(min(remaining, 0.5))
        try:
            sock, _ = server.accept()
        except TimeoutError:
            continue
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        channel = SocketChannel(sock)
        try:
            worker_id = _register(channel, taken, total, args, max(remaining, 1.0))
        except ArmfleetError as e:
            channel.close()
            console.print(f"[yellow]⚠ Rejected a registration: {e}[/yellow]")
            continue
        console.print(f"[dim]Worker {worker_id} registered from {channel.peer}[/dim]")
        taken.add(worker_id)
        process = processes.get(worker_id)
        workers.append(
            WorkerHandle(
                worker_id=worker_id,
                channel=channel,
                pid=None if process is None else process.pid,
                process=process,
            )
        )
    workers.sort(key=lambda w: w.worker_id)
    return workers


def spawn_cluster(cfg: ClusterConfig, args: SpawnArgs) -> ClusterHandle:
    """Start (or await) ``cfg.total_workers`` workers and register them.

    Raises:
        SpawnError: If a worker cannot be launched or does not register; every
            already-started worker is terminated first.
    """
    if cfg.mode == "in-process":
        return _spawn_in_process(cfg, args)

    server = _bind(cfg, cfg.total_workers)
    host, port = server.getsockname()[:2]
    address = f"{host}:{port}"
    processes: dict[int, subprocess.Popen[bytes]] = {}
    try:
        if cfg.mode == "local-processes":
            for index in range(cfg.total_workers):
                command = _worker_command(args, address, index)
                try:
                    processes[index] = subprocess.Popen(command, stdin=subprocess.DEVNULL)
                except OSError as e:
                    raise SpawnError(
                        f"Cannot launch worker {index} ({command[0]}): {e}", "spawn"
                    ) from e
        else:
            console.print(f"[blue]Waiting for {cfg.total_workers} remote workers on {address}[/blue]")
        workers = _accept_workers(server, cfg, args, processes)
    except BaseException:
        _terminate(processes)
        server.close()
        raise
    return ClusterHandle(config=cfg, workers=workers, server=server)


def _wait_exit(worker: WorkerHandle, timeout: float) -> bool:
    if worker.process is not None:
        try:
            worker.process.wait(timeout=timeout)
        except subprocess.TimeoutExpired:
            return False
        return True
    if worker.thread is not None:
        worker.thread.join(timeout)
        return not worker.thread.is_alive()
    return True


def shutdown_cluster(handle: ClusterHandle, timeout: float = 10.0) -> list[WorkerExitRecord]:
    """Send Shutdown to every worker and report how each one ended.

    A second call returns the cached report.
    """
    if handle.exit_report is not None:
        return handle.exit_report

    alive_before = {w.worker_id: w.is_alive() for w in handle.workers}
    for worker in handle.workers:
        if alive_before[worker.worker_id]:
            try:
                worker.channel.send(shutdown_frame())
            except ChannelClosedError:
                pass

    report: list[WorkerExitRecord] = []
    for worker in handle.workers:
        if not alive_before[worker.worker_id]:
            report.append(
                WorkerExitRecord(
                    worker_id=worker.worker_id, status="absent", returncode=worker.returncode
                )
            )
            continue
        exited = _wait_exit(worker, timeout)
        if not exited and worker.process is not None:
            worker.process.kill()
            worker.process.wait()
        clean = exited and worker.returncode == 0
        report.append(
            WorkerExitRecord(
                worker_id=worker.worker_id,
                status="clean" if clean else "forced",
                returncode=worker.returncode,
            )
        )

    for worker in handle.workers:
        worker.channel.close()
    if handle.server is not None:
        handle.server.close()
    handle.exit_report = report
    return report
