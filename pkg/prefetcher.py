# prefetcher.py (训练数据预取：后台线程 + 有界队列)

import logging
import queue
import threading

import numpy as np

import config
from data import StyleDomain, UnpairedBatch, sample_unpaired_batch

logger = logging.getLogger(__name__)

_DONE = object()


class _Failure:
    def __init__(self, exc: BaseException):
        self.exc = exc


class BatchPrefetcher:
    """
    在后台线程里为一个 epoch 采样 n_batches 个非配对 batch，放进有界队列。
    每个 epoch 用独立的 rng（由主 rng 派生），所以预取与否不影响确定性。
    生产线程里的异常会在消费端原样抛出。
    """

    def __init__(
        self,
        domain_x: StyleDomain,
        domain_y: StyleDomain,
        batch_size: int,
        clip_len: int,
        n_batches: int,
        rng: np.random.Generator,
        with_music: bool,
        depth: int = config.PREFETCH_DEPTH,
    ):
        self.domain_x = domain_x
        self.domain_y = domain_y
        self.batch_size = batch_size
        self.clip_len = clip_len
        self.n_batches = n_batches
        self.rng = rng
        self.with_music = with_music

        self.batch_queue: queue.Queue = queue.Queue(maxsize=max(1, depth))
        self.stop_event = threading.Event()
        self.worker_thread = threading.Thread(target=self._producer_loop, daemon=True)

    def _put(self, item) -> bool:
        while not self.stop_event.is_set():
            try:
                self.batch_queue.put(item, timeout=0.5)
                return True
            except queue.Full:
                continue
        return False

    def _producer_loop(self):
        try:
            for _ in range(self.n_batches):
                batch = sample_unpaired_batch(
                    self.domain_x, self.domain_y, self.batch_size, self.clip_len, self.rng, with_music=self.with_music
                )
                if not self._put(batch):
                    return
        except Exception as e:
            logger.error("❌ 预取线程: 采样失败: %s", e)
            self._put(_Failure(e))
            return
        self._put(_DONE)

    def __enter__(self) -> "BatchPrefetcher":
        self.worker_thread.start()
        return self

    def __exit__(self, *exc_info):
        self.close()

    def close(self) -> None:
        self.stop_event.set()
        self.worker_thread.join(timeout=5)

    def __iter__(self):
        while True:
            try:
                item = self.batch_queue.get(timeout=0.5)
            except queue.Empty:
                if not self.worker_thread.is_alive() and self.batch_queue.empty():
                    return
                continue
            if item is _DONE:
                return
            if isinstance(item, _Failure):
                raise item.exc
            yield item


def epoch_batches(
    domain_x: StyleDomain,
    domain_y: StyleDomain,
    batch_size: int,
    clip_len: int,
    n_batches: int,
    rng: np.random.Generator,
    with_music: bool,
) -> list[UnpairedBatch]:
    """同步版本（测试用）：与预取线程产生完全相同的序列。"""
    return [
        sample_unpaired_batch(domain_x, domain_y, batch_size, clip_len, rng, with_music=with_music)
        for _ in range(n_batches)
    ]
