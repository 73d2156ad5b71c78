"""Regenerate the packaged synthetic-fixture parameter files.

The fixture values are data, not code: this script writes them to
src/scriptcausal/fixtures/ so oracle quantities stay reproducible and
reviewable.
"""

import pathlib

from scriptcausal.synth import SyntheticCBN

OUT = pathlib.Path(__file__).resolve().parent.parent / "src/scriptcausal/fixtures"

EVENTS = ["buy_ticket:nsubj", "park_car:nsubj", "watch_sad:nsubj",
          "eat_popcorn:nsubj", "cry:nsubj", "sob:nsubj", "shop:nsubj",
          "go_home:nsubj"]

# Design notes for the confounded fixture.
#
# The intervention estimator averages the conditional model over contexts
# whose previous event is replaced by the intervened one. The model's only
# multiplicative route for scenario information is the history encoder, so
# the fixture is built to keep that route reliable:
#   * each scenario opens with a near-deterministic marker event
#     (buy_ticket / park_car), so almost every non-empty history identifies
#     the scenario outright;
#   * the start rows give eat_popcorn and watch_sad identical probability in
#     both scenarios, so empty-history contexts carry no scenario evidence
#     and the conditional learned there already equals the adjusted row;
#   * only the watch_sad and eat_popcorn rows differ between scenarios; the
#     remaining rows are shared, so most of the table is identifiable from
#     on-distribution data.
# eat_popcorn occurs mostly in the cinema scenario (via buy_ticket), which
# inflates its observed association with cry well above its interventional
# effect, while watch_sad occurs often on errands (park_car / shop rows),
# diluting its co-occurrence statistics despite its stronger true effect.
SHARED_ROWS = {
    "buy_ticket:nsubj": {"watch_sad:nsubj": 0.3, "eat_popcorn:nsubj": 0.4,
                         "cry:nsubj": 0.15, "sob:nsubj": 0.15},
    "park_car:nsubj": {"shop:nsubj": 0.4, "go_home:nsubj": 0.25,
                       "eat_popcorn:nsubj": 0.05, "watch_sad:nsubj": 0.3},
    "cry:nsubj": {"sob:nsubj": 0.4, "cry:nsubj": 0.15,
                  "go_home:nsubj": 0.3, "eat_popcorn:nsubj": 0.15},
    "sob:nsubj": {"cry:nsubj": 0.35, "sob:nsubj": 0.2,
                  "go_home:nsubj": 0.3, "eat_popcorn:nsubj": 0.15},
    "shop:nsubj": {"go_home:nsubj": 0.41, "shop:nsubj": 0.25,
                   "eat_popcorn:nsubj": 0.04, "watch_sad:nsubj": 0.3},
    "go_home:nsubj": {"shop:nsubj": 0.3, "go_home:nsubj": 0.2,
                      "cry:nsubj": 0.23, "sob:nsubj": 0.23,
                      "eat_popcorn:nsubj": 0.04},
}

POPCORN = {
    "name": "F-POPCORN",
    "events": EVENTS,
    "lambda": 0.1,
    "chain_length": 6,
    "scenarios": [
        {
            "name": "sad_cinema",
            "prob": 0.5,
            "kernel": {
                "<s>": {"buy_ticket:nsubj": 0.6, "watch_sad:nsubj": 0.1,
                        "eat_popcorn:nsubj": 0.1, "cry:nsubj": 0.12,
                        "sob:nsubj": 0.08},
                "watch_sad:nsubj": {"cry:nsubj": 0.6, "sob:nsubj": 0.2,
                                    "eat_popcorn:nsubj": 0.2},
                "eat_popcorn:nsubj": {"cry:nsubj": 0.55, "sob:nsubj": 0.2,
                                      "go_home:nsubj": 0.15,
                                      "eat_popcorn:nsubj": 0.1},
                **SHARED_ROWS,
            },
        },
        {
            "name": "errand",
            "prob": 0.5,
            "kernel": {
                "<s>": {"park_car:nsubj": 0.6, "watch_sad:nsubj": 0.1,
                        "eat_popcorn:nsubj": 0.1, "shop:nsubj": 0.12,
                        "go_home:nsubj": 0.08},
                "watch_sad:nsubj": {"cry:nsubj": 0.15, "go_home:nsubj": 0.4,
                                    "shop:nsubj": 0.25, "watch_sad:nsubj": 0.1,
                                    "eat_popcorn:nsubj": 0.1},
                "eat_popcorn:nsubj": {"cry:nsubj": 0.02, "go_home:nsubj": 0.38,
                                      "shop:nsubj": 0.3, "park_car:nsubj": 0.2,
                                      "eat_popcorn:nsubj": 0.1},
                **SHARED_ROWS,
            },
        },
    ],
}

DET_EVENTS = [f"step{i}:nsubj" for i in range(8)]
DET = {
    "name": "F-DET",
    "events": DET_EVENTS,
    "lambda": 0.02,
    "chain_length": 8,
    "scenarios": [
        {
            "name": "cycle",
            "prob": 1.0,
            "kernel": {"<s>": {DET_EVENTS[0]: 1.0},
                       **{DET_EVENTS[i]: {DET_EVENTS[(i + 1) % 8]: 1.0}
                          for i in range(8)}},
        }
    ],
}

UNIFORM = {
    "name": "F-UNIFORM",
    "events": EVENTS,
    "lambda": 0.1,
    "chain_length": 8,
    "scenarios": [
        {
            "name": "flat",
            "prob": 1.0,
            "kernel": {src: {e: 0.125 for e in EVENTS}
                       for src in ["<s>"] + EVENTS},
        }
    ],
}


def main():
    for spec, fname in [(POPCORN, "f_popcorn.json"), (DET, "f_det.json"),
                        (UNIFORM, "f_uniform.json")]:
        cbn = SyntheticCBN.from_dict(spec)  # validates rows sum to 1
        cbn.save(OUT / fname)
        print(f"wrote {fname}: |E|={cbn.num_events} scenarios={cbn.num_scenarios}")


if __name__ == "__main__":
    main()
