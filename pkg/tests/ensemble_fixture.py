"""100-record two-member fixture with planted disagreements.

Each image has a true class t, a rival class r = t+1 and a third class o = t+2
(mod 3).  Member probabilities are given as (p_t, p_r, p_o) per category:

    category        n   member A           member B           1:1   2:1
    agree_right     70  (.8, .1, .1)       (.8, .1, .1)       right right
    agree_wrong     10  (.2, .7, .1)       (.2, .7, .1)       wrong wrong
    a_decides       12  (.7, .2, .1)       (.1, .8, .1)       wrong right
    b_decides        8  (.3, .6, .1)       (.9, .05, .05)     right right

Mixed (p_t, p_r) for the disputed categories, worked by hand:
    a_decides 1:1 -> (.40, .50)  2:1 -> (1.5/3, 1.2/3) = (.50, .40)
    b_decides 1:1 -> (.60, .325) 2:1 -> (1.5/3, 1.25/3) = (.50, .4167)
"""

from cxrvit.ensemble import CLASSES, PredictionRecord

CATEGORIES = [
    ("agree_right", 70, (0.8, 0.1, 0.1), (0.8, 0.1, 0.1)),
    ("agree_wrong", 10, (0.2, 0.7, 0.1), (0.2, 0.7, 0.1)),
    ("a_decides", 12, (0.7, 0.2, 0.1), (0.1, 0.8, 0.1)),
    ("b_decides", 8, (0.3, 0.6, 0.1), (0.9, 0.05, 0.05)),
]

# hand-counted correct records out of 100
HAND_ACCURACY = {"A": 0.8200, "B": 0.7800, "1:1": 0.7800, "2:1": 0.9000}


def _place(t, ptro):
    probs = [0.0, 0.0, 0.0]
    probs[t], probs[(t + 1) % 3], probs[(t + 2) % 3] = ptro
    return tuple(probs)


def build():
    """(member_a, member_b, truth) with B listed in reverse order."""
    a, b, truth = [], [], {}
    k = 0
    for name, n, pa, pb in CATEGORIES:
        for _ in range(n):
            t = k % 3
            image_id = f"{name}_{k:03d}.pgm"
            truth[image_id] = t
            a.append(PredictionRecord(image_id, _place(t, pa)))
            b.append(PredictionRecord(image_id, _place(t, pb)))
            k += 1
    return a, b[::-1], truth


def truth_manifest(truth):
    lines = ["image_id,label"] + [f"{i},{CLASSES[t]}" for i, t in truth.items()]
    return "\n".join(lines) + "\n"
