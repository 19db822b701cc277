import pytest

from orderbook import OrderBook, Side
from ziflow import FlowConfig


@pytest.fixture
def make_book():
    """Book from (price, volume) lists; ids count up from 1 in insertion order, bids first"""

    def build(bids=(), asks=()) -> OrderBook:
        book = OrderBook()
        order_id = 1
        for side, levels in ((Side.BUY, bids), (Side.SELL, asks)):
            for price, volume in levels:
                book.insert_limit(side, price, volume, order_id)
                order_id += 1
        return book

    return build


@pytest.fixture
def small_config() -> FlowConfig:
    return FlowConfig(
        p_lo=0.5, p_mo=0.16, p_c=0.34,
        D=20, J=10, f=1 / 500,
        warmup_steps=2000, total_steps=5000,
        seed=7, initial_price=1000, initial_depth=300,
        window_pre=10, window_post=200,
    )
