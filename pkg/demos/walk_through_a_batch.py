"""Walk one live batch through the operations that keep it running.

Two queries start together.  When the short one finishes, a new raw prompt is
shaped into its slot; later a prefilled query is embedded instead; finally the
shared placeholder prefix is released.  After each stage we print the mask so
the bookkeeping can be followed by eye, and at the end every stream is checked
against the same query decoded alone.
"""
import numpy as np

from relaybatch import (ModelConfig, Query, TinyTransformer, embed_insert, extract_slot, new_batch,
                        prefill_query, release_prefix, run_solo, shape_insert, step)

model = TinyTransformer(ModelConfig(seed=5, vocab_size=64))
a = Query(0, (5, 9, 14, 3), max_new_tokens=12)
b = Query(1, (7, 2), max_new_tokens=2)
c = Query(2, (11, 12, 13, 14, 15, 16), max_new_tokens=4)
d = Query(3, (20, 21, 22), max_new_tokens=5)


def show(title, batch):
    print(f"-- {title}: kv_len={batch.kv_len} pad_start={[s.pad_start for s in batch.slots]}")
    for row in batch.mask:
        print("   ", "".join("#" if v else "." for v in row))


streams = {}


def advance(batch):
    step(batch)
    for _, query, generated in batch.last_finished:
        streams[query.id] = generated


batch = new_batch([a, b], model)
streams.update({query.id: generated for _, query, generated in batch.last_finished})
show("prefilled together, b left-padded", batch)
while batch.slots[1].occupant is not None:
    advance(batch)
show("b finished", batch)

# the raw prompt of c rides along in the next forward; slot 0 gets padded columns
shape_insert(batch, 1, c)
advance(batch)
show(f"c shaped in ({batch.last_bubbles} padded columns computed)", batch)
while batch.slots[1].occupant is not None:
    advance(batch)

# d was prefilled elsewhere; its K/V are copied in end-aligned, no padding
embed_insert(batch, 1, prefill_query(d, model))
show("d embedded", batch)
show(f"release frees {release_prefix(batch)} columns while a is live", batch)

parked = extract_slot(batch, 0)
show(f"a parked with {parked.length} columns; release frees {release_prefix(batch)}", batch)
embed_insert(batch, 0, parked)
show("a back, end-aligned", batch)

while batch.occupied():
    advance(batch)
for q in (a, b, c, d):
    same = streams[q.id] == run_solo(q, model)
    print(f"query {q.id}: {streams[q.id]} matches solo run: {same}")
assert all(streams[q.id] == run_solo(q, model) for q in (a, b, c, d))
