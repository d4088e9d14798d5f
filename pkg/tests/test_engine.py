import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings, strategies as st

from relaybatch import (ContractViolation, ModelConfig, Query, SlotStatus, TinyTransformer, embed_insert,
                        empty_batch, extract_slot, new_batch, prefill_group, prefill_query, release_prefix,
                        run_solo, shape_insert, step)


@pytest.fixture(scope="module")
def model():
    return TinyTransformer(ModelConfig(seed=5, vocab_size=61))


def q(qid, prompt, n=6):
    return Query(qid, tuple(prompt), max_new_tokens=n)


def drain(batch, streams=None):
    streams = {} if streams is None else streams
    while batch.occupied():
        step(batch)
        for _, query, gen in batch.last_finished:
            streams[query.id] = gen
    return streams


def test_new_batch_left_pads_to_longest(model):
    batch = new_batch([q(0, [5, 6], 3), q(1, [7, 8, 9, 10], 3)], model)
    assert batch.kv_len == 4
    assert batch.mask.tolist() == [[0, 0, 1, 1], [1, 1, 1, 1]]
    assert [s.pad_start for s in batch.slots] == [2, 0]


def test_single_query_has_no_padding(model):
    batch = new_batch([q(0, [5, 6, 7])], model)
    assert batch.slots[0].pad_start == 0 and batch.mask.all()


def test_first_tokens_match_solo(model):
    queries = [q(0, [4, 9]), q(1, [11, 3, 40, 2, 8]), q(2, [7])]
    batch = new_batch(queries, model)
    for i, query in enumerate(queries):
        assert batch.slots[i].generated[0] == run_solo(query, model)[0]


def test_empty_prompt_rejected():
    with pytest.raises(ValueError):
        Query(0, ())


def test_step_bookkeeping(model):
    batch = new_batch([q(0, [3, 4], 8), q(1, [5], 2)], model, slots=3)
    assert batch.slots[2].status is SlotStatus.DRAINED
    before = batch.kv_len
    emitted = step(batch)
    assert batch.kv_len == batch.mask.shape[1] == before + 1
    assert emitted[2] == model.config.eos_token


def test_batch_of_one_matches_no_cache_oracle(model):
    query = q(0, [12, 30, 7], 5)
    stream = run_solo(query, model)
    seq = list(query.prompt)
    for tok in stream:
        assert tok == int(np.argmax(model.reference_logits(seq)[-1]))
        seq.append(tok)


def test_shape_insert_mask_length(model):
    # 9 cached columns; the inserted prompt of 4 rides in the next forward
    batch = new_batch([q(0, [3, 4, 5, 6, 7, 8, 9, 10], 20), q(1, [2, 2], 1)], model)
    step(batch)
    assert batch.kv_len == 9 and batch.slots[1].status is SlotStatus.DRAINED
    shape_insert(batch, 1, q(2, [40, 41, 42, 43]))
    assert batch.attention_mask.shape[1] == 13
    step(batch)
    assert batch.mask.shape[1] == 13
    assert batch.last_bubbles == 3
    assert batch.mask[1].tolist() == [0] * 9 + [1] * 4


def test_shape_insert_of_one_token_needs_no_padding(model):
    batch = new_batch([q(0, [3, 4, 5], 9), q(1, [6], 1)], model)
    shape_insert(batch, 1, q(2, [7]))
    step(batch)
    assert batch.last_bubbles == 0


def test_shape_insert_into_live_slot_refused(model):
    batch = new_batch([q(0, [3, 4])], model)
    with pytest.raises(ContractViolation):
        shape_insert(batch, 0, q(1, [5]))


def test_shape_insert_streams_match_solo_and_no_insert(model):
    a, b, c = q(0, [3, 14, 15], 9), q(1, [9, 2], 2), q(2, [26, 5, 35, 8], 6)
    alone = drain(new_batch([a, b], model))
    batch = new_batch([a, b], model)
    streams = {}
    while batch.slots[1].status is SlotStatus.DECODING:
        step(batch)
        for _, query, gen in batch.last_finished:
            streams[query.id] = gen
    shape_insert(batch, 1, c)
    drain(batch, streams)
    assert streams[0] == alone[0] == run_solo(a, model)
    assert streams[2] == run_solo(c, model)


def test_prefill_query_matches_singleton_batch(model):
    query = q(0, [8, 1 + 1, 19])
    pq = prefill_query(query, model)
    batch = new_batch([query], model)
    assert pq.length == 3
    for layer in range(model.config.layers):
        assert np.array_equal(pq.keys[layer], batch.kv.keys[layer][0])
        assert np.array_equal(pq.values[layer], batch.kv.values[layer][0])
    assert pq.generated[0] == run_solo(query, model)[0]


def test_group_prefill_equals_solo_prefill(model):
    queries = [q(0, [3]), q(1, [4, 5, 6, 7]), q(2, [8, 9])]
    for grouped, query in zip(prefill_group(queries, model), queries):
        solo = prefill_query(query, model)
        assert grouped.generated == solo.generated
        for layer in range(model.config.layers):
            assert np.array_equal(grouped.keys[layer], solo.keys[layer])


def test_embed_insert_end_aligned(model):
    batch = new_batch([q(0, [3, 4, 5, 6, 7], 9), q(1, [8], 1)], model)
    assert batch.kv_len == 5
    embed_insert(batch, 1, prefill_query(q(2, [9, 10, 11]), model))
    assert batch.mask[1].tolist() == [0, 0, 1, 1, 1]
    assert batch.slots[1].pad_start == 2
    assert batch.input_width == 1


def test_embed_insert_exact_fit(model):
    batch = new_batch([q(0, [3, 4, 5], 9), q(1, [8], 1)], model)
    embed_insert(batch, 1, prefill_query(q(2, [9, 10, 11]), model))
    assert batch.slots[1].pad_start == 0 and batch.mask[1].all()


def test_embed_insert_longer_than_cache(model):
    a, b, c = q(0, [3, 4, 5, 6, 7], 8), q(1, [8], 1), q(2, [9, 10, 11, 12, 13, 14, 15], 5)
    batch = new_batch([a, b], model)
    live_before = batch.slots[0].pad_start
    embed_insert(batch, 1, prefill_query(c, model))
    assert batch.kv_len == 7
    assert batch.mask[0, :2].tolist() == [0, 0]
    assert batch.slots[0].pad_start == live_before + 2
    streams = drain(batch)
    assert streams[0] == run_solo(a, model) and streams[2] == run_solo(c, model)


def test_embed_into_live_slot_refused(model):
    batch = new_batch([q(0, [3, 4])], model)
    with pytest.raises(ContractViolation):
        embed_insert(batch, 0, prefill_query(q(1, [5]), model))


def test_release_prefix_bookkeeping(model):
    batch = empty_batch(model, 3)
    for slot, n in enumerate([6, 4, 5]):
        embed_insert(batch, slot, prefill_query(q(slot, list(range(2, 2 + n)), 9), model))
    # end-aligned lengths 6, 4, 5 in kv 6 give pad_start 0, 2, 1; push every slot forward by 3
    batch.kv.pad_left(3)
    batch.mask = np.concatenate([np.zeros((3, 3), np.int8), batch.mask], axis=1)
    for s in batch.slots:
        s.pad_start += 3
    assert [s.pad_start for s in batch.slots] == [3, 5, 4]
    kv_len = batch.kv_len
    assert release_prefix(batch) == 3
    assert [s.pad_start for s in batch.slots] == [0, 2, 1]
    assert batch.kv_len == kv_len - 3
    assert release_prefix(batch) == 0


def test_release_does_not_change_streams(model):
    queries = [q(0, [3, 4, 5, 6], 10), q(1, [7], 2), q(2, [8, 9], 4), q(3, [10, 11, 12], 3)]

    def run(release):
        batch = new_batch(queries[:2], model)
        pending, streams = list(queries[2:]), {}
        while batch.occupied() or pending:
            if release:
                release_prefix(batch)
            for slot in batch.drained():
                if pending:
                    shape_insert(batch, slot, pending.pop(0))
            step(batch)
            for _, query, gen in batch.last_finished:
                streams[query.id] = gen
        return streams, batch

    kept, _ = run(False)
    released, batch = run(True)
    assert kept == released
    assert all(released[x.id] == run_solo(x, model) for x in queries)


def test_extract_round_trip(model):
    a, b = q(0, [3, 4, 5], 9), q(1, [6, 7, 8, 9], 9)
    batch = new_batch([a, b], model)
    pq = prefill_query(q(2, [10, 11]), model)
    batch2 = new_batch([a], model, slots=2)
    embed_insert(batch2, 1, pq)
    step(batch2)
    back = extract_slot(batch2, 1)
    assert back.length == pq.length + 1
    for layer in range(model.config.layers):
        assert np.array_equal(back.keys[layer][:, :pq.length], pq.keys[layer])
    # extracting a freshly prefilled slot of length l yields l columns
    assert extract_slot(batch, 1).length == 4


def test_extract_then_reinsert_resumes_identically(model):
    a, b = q(0, [3, 4, 5], 10), q(1, [6, 7], 10)
    batch = new_batch([a, b], model)
    step(batch)
    step(batch)
    pq = extract_slot(batch, 1)
    step(batch)
    embed_insert(batch, 1, pq)
    streams = drain(batch)
    assert streams[1] == run_solo(b, model)
    assert streams[0] == run_solo(a, model)


def test_extract_empty_slot_refused(model):
    batch = new_batch([q(0, [3])], model, slots=2)
    with pytest.raises(ContractViolation):
        extract_slot(batch, 1)


@settings(max_examples=25, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(st.lists(st.lists(st.integers(2, 60), min_size=1, max_size=8), min_size=1, max_size=5),
       st.integers(0, 3))
def test_any_batch_composition_matches_solo(model, prompts, extra_slots):
    queries = [q(i, p, 4) for i, p in enumerate(prompts)]
    batch = new_batch(queries, model, slots=len(queries) + extra_slots)
    streams = {query.id: gen for _, query, gen in batch.last_finished}
    drain(batch, streams)
    assert all(streams[x.id] == run_solo(x, model) for x in queries)
