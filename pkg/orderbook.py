r"""
Price-time priority limit order book.

Prices are integer ticks. Each side is a SortedDict price -> deque of resting
orders, so the best level is an end of the dict and orders at one level are
matched first in, first out.

Besides matching, the book reports the microstructure observables used by the
analysis: mid-price, spread (ticks and log), first and second gaps per side,
buy/sell imbalance and the number of queuing orders.
"""

from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass
from enum import Enum
from typing import Protocol

from sortedcontainers import SortedDict

from errors import DataError

logger = logging.getLogger(__name__)


class Side(str, Enum):
    BUY = "buy"
    SELL = "sell"

    @property
    def opposite(self) -> "Side":
        return Side.SELL if self is Side.BUY else Side.BUY


class RandomSource(Protocol):
    def random(self) -> float: ...


class CrossingPrice(DataError):
    """A limit order would trade against the opposite best price"""


class DuplicateId(DataError):
    """Order id already used in this book"""


class InsufficientLiquidity(DataError):
    """Opposite side holds less volume than the market order requests"""


class EmptySide(DataError):
    """The requested side has no resting orders"""


class UnknownId(DataError):
    """No resting order carries this id"""


class PartialBook(DataError):
    """Stats need both sides of the book"""

    def __init__(self, best_bid: int | None, best_ask: int | None):
        super().__init__(f"book is one-sided: best bid={best_bid}, best ask={best_ask}")
        self.best_bid = best_bid
        self.best_ask = best_ask


@dataclass(slots=True)
class Order:
    id: int
    side: Side
    price: int
    volume: int
    seq: int


@dataclass(slots=True, frozen=True)
class Fill:
    price: int
    volume: int
    counterparty_id: int


@dataclass(slots=True, frozen=True)
class BookStats:
    best_bid: int
    best_ask: int
    mid: float
    spread_ticks: int
    log_spread: float | None
    gap1_bid: int | None
    gap1_ask: int | None
    gap2_bid: int | None
    gap2_ask: int | None
    imbalance_buy: float
    imbalance_sell: float
    n_bid_orders: int
    n_ask_orders: int
    volume_buy: int
    volume_sell: int


class OrderBook:
    def __init__(self):
        self.bids: SortedDict = SortedDict()
        self.asks: SortedDict = SortedDict()
        self._orders: dict[int, Order] = {}
        # resident orders per side in a flat list, for O(1) uniform draws
        self._resident: dict[Side, list[Order]] = {Side.BUY: [], Side.SELL: []}
        self._slot: dict[int, int] = {}
        self._volume: dict[Side, int] = {Side.BUY: 0, Side.SELL: 0}
        self._seq = 0

    # -- inspection ---------------------------------------------------------

    def _levels(self, side: Side) -> SortedDict:
        return self.bids if side is Side.BUY else self.asks

    @property
    def total_buy_volume(self) -> int:
        return self._volume[Side.BUY]

    @property
    def total_sell_volume(self) -> int:
        return self._volume[Side.SELL]

    def volume(self, side: Side) -> int:
        return self._volume[side]

    def best_bid(self) -> int | None:
        if not self.bids:
            return None
        return self.bids.peekitem(-1)[0]

    def best_ask(self) -> int | None:
        if not self.asks:
            return None
        return self.asks.peekitem(0)[0]

    def n_orders(self, side: Side) -> int:
        return len(self._resident[side])

    def is_empty(self, side: Side) -> bool:
        return not self._resident[side]

    def __len__(self) -> int:
        return len(self._orders)

    def get(self, order_id: int) -> Order:
        try:
            return self._orders[order_id]
        except KeyError:
            raise UnknownId(f"order {order_id} is not resting in the book") from None

    def level(self, side: Side, price: int) -> list[Order]:
        """Orders at one price level, head of the queue first"""
        return list(self._levels(side).get(price, ()))

    def occupied_prices(self, side: Side) -> list[int]:
        """Occupied price levels, best first"""
        prices = list(self._levels(side).keys())
        return prices[::-1] if side is Side.BUY else prices

    # -- bookkeeping --------------------------------------------------------

    def _track(self, order: Order) -> None:
        resident = self._resident[order.side]
        self._slot[order.id] = len(resident)
        resident.append(order)
        self._orders[order.id] = order
        self._volume[order.side] += order.volume

    def _untrack(self, order: Order) -> None:
        resident = self._resident[order.side]
        index = self._slot.pop(order.id)
        last = resident.pop()
        if last is not order:
            resident[index] = last
            self._slot[last.id] = index
        del self._orders[order.id]
        self._volume[order.side] -= order.volume

    def _remove_resting(self, order: Order) -> None:
        levels = self._levels(order.side)
        queue = levels[order.price]
        queue.remove(order)
        if not queue:
            del levels[order.price]
        self._untrack(order)

    # -- operations ---------------------------------------------------------

    def insert_limit(self, side: Side, price: int, volume: int, order_id: int) -> Order:
        """Append a limit order at the tail of its price level"""
        if volume < 1:
            raise ValueError(f"volume must be a positive integer, got {volume}")
        if order_id in self._orders:
            raise DuplicateId(f"order id {order_id} already resting")
        if side is Side.BUY:
            best_ask = self.best_ask()
            if best_ask is not None and price >= best_ask:
                raise CrossingPrice(f"buy @{price} crosses best ask {best_ask}")
        else:
            best_bid = self.best_bid()
            if best_bid is not None and price <= best_bid:
                raise CrossingPrice(f"sell @{price} crosses best bid {best_bid}")

        self._seq += 1
        order = Order(id=order_id, side=side, price=price, volume=volume, seq=self._seq)
        levels = self._levels(side)
        queue = levels.get(price)
        if queue is None:
            queue = levels[price] = deque()
        queue.append(order)
        self._track(order)
        return order

    def execute_market(self, side: Side, volume: int) -> list[Fill]:
        """Match a market order of the given side against the opposite best levels"""
        if volume < 1:
            raise ValueError(f"volume must be a positive integer, got {volume}")
        opposite = side.opposite
        if self._volume[opposite] < volume:
            raise InsufficientLiquidity(
                f"market {side.value} for {volume} but only {self._volume[opposite]} resting"
            )

        levels = self._levels(opposite)
        best_index = 0 if opposite is Side.SELL else -1
        fills: list[Fill] = []
        remaining = volume
        while remaining > 0:
            price, queue = levels.peekitem(best_index)
            while queue and remaining > 0:
                resting = queue[0]
                matched = min(remaining, resting.volume)
                fills.append(Fill(price=price, volume=matched, counterparty_id=resting.id))
                remaining -= matched
                if matched == resting.volume:
                    queue.popleft()
                    self._untrack(resting)
                else:
                    resting.volume -= matched
                    self._volume[opposite] -= matched
            if not queue:
                del levels[price]
        return fills

    def cancel_uniform(self, side: Side, rng: RandomSource) -> Order:
        """Remove one resting order, each unit of volume on the side equally likely"""
        resident = self._resident[side]
        if not resident:
            raise EmptySide(f"no {side.value} orders to cancel")

        if self._volume[side] == len(resident):
            index = min(int(rng.random() * len(resident)), len(resident) - 1)
            order = resident[index]
        else:
            target = int(rng.random() * self._volume[side])
            for order in resident:
                target -= order.volume
                if target < 0:
                    break
        self._remove_resting(order)
        return order

    def cancel_by_id(self, order_id: int) -> Order:
        order = self.get(order_id)
        self._remove_resting(order)
        return order

    def clear_band(self, side: Side, lo: int, hi: int) -> list[Order]:
        """Remove every order on one side with price in [lo, hi]"""
        levels = self._levels(side)
        removed: list[Order] = []
        for price in list(levels.irange(lo, hi)):
            for order in levels.pop(price):
                self._untrack(order)
                removed.append(order)
        return removed

    def stats(self) -> BookStats:
        best_bid = self.best_bid()
        best_ask = self.best_ask()
        if best_bid is None or best_ask is None:
            raise PartialBook(best_bid, best_ask)

        n_bid_levels = len(self.bids)
        n_ask_levels = len(self.asks)
        gap1_bid = best_bid - self.bids.peekitem(-2)[0] if n_bid_levels >= 2 else None
        gap2_bid = self.bids.peekitem(-2)[0] - self.bids.peekitem(-3)[0] if n_bid_levels >= 3 else None
        gap1_ask = self.asks.peekitem(1)[0] - best_ask if n_ask_levels >= 2 else None
        gap2_ask = self.asks.peekitem(2)[0] - self.asks.peekitem(1)[0] if n_ask_levels >= 3 else None

        volume_buy = self._volume[Side.BUY]
        volume_sell = self._volume[Side.SELL]
        total = volume_buy + volume_sell
        log_spread = math.log(best_ask) - math.log(best_bid) if best_bid > 0 else None

        return BookStats(
            best_bid=best_bid,
            best_ask=best_ask,
            mid=(best_ask + best_bid) / 2,
            spread_ticks=best_ask - best_bid,
            log_spread=log_spread,
            gap1_bid=gap1_bid,
            gap1_ask=gap1_ask,
            gap2_bid=gap2_bid,
            gap2_ask=gap2_ask,
            imbalance_buy=volume_buy / total,
            imbalance_sell=volume_sell / total,
            n_bid_orders=len(self._resident[Side.BUY]),
            n_ask_orders=len(self._resident[Side.SELL]),
            volume_buy=volume_buy,
            volume_sell=volume_sell,
        )

    def rescan_volumes(self) -> tuple[int, int]:
        """Recount both side totals from the price levels"""
        buy = sum(order.volume for queue in self.bids.values() for order in queue)
        sell = sum(order.volume for queue in self.asks.values() for order in queue)
        return buy, sell

    def check_invariants(self) -> None:
        """Raise AssertionError if the book state is inconsistent"""
        assert self.rescan_volumes() == (self._volume[Side.BUY], self._volume[Side.SELL])
        for levels in (self.bids, self.asks):
            for queue in levels.values():
                assert queue, "empty price level left in the book"
                assert all(order.volume >= 1 for order in queue)
        best_bid, best_ask = self.best_bid(), self.best_ask()
        if best_bid is not None and best_ask is not None:
            assert best_bid < best_ask, f"crossed book: {best_bid} >= {best_ask}"
