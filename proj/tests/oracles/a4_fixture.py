# Regenerates tests/data/a4_fixture.json: 200 raw review lines grouped into
# reviews, with the outputs of an independent Python transcription of the
# reference preprocessing code.
import html
import json
import random
import re


def preprocess(line):
    line = line.lower()
    line = re.sub("['()\"]", " ", line)
    line = re.sub(r"\$[\d.]*", "$", line)
    line = re.sub(r"[\d.]*%", "%", line)
    line = re.sub(r" \d[ ,]", " num_num ", line)
    line = re.sub(r" \d[^ ]*", " num_extend", line)
    line = re.sub(r"\d[\d.]*", "", line)
    line = re.sub("([.,?!:])", r" \1 ", line)
    return re.sub(r"\.  ([a-z])", r". \1", line)


def acceptable_line(line):
    if not line or len(line) < 30 or len(line) >= 100:
        return False
    if re.search("[^ !$%&,-.:;?_a-z]", line):
        return False
    return True


def clip_to_last_period(line):
    return line[: len(line) - line[::-1].index(".")]


def adjacent_lines(review):
    review = html.unescape(review)
    review = review.replace('\\"', '"')
    if "\n" not in review:
        return None
    lines = review.split("\n")
    lines = [preprocess(clip_to_last_period(l[:100])) for l in lines if l and "." in l[:100]]
    lines = [preprocess(l) for l in lines]
    lines = [l for l in lines if acceptable_line(l)]
    if len(lines) < 2:
        return None
    return list(zip(lines[:-1], lines[1:]))


PLAIN = (
    "This product is Great I loved it the battery lasts all day but shipping was slow "
    "would buy again Not worth the money My kids use it every morning Works as described"
).split()

SPECIAL = (
    "Café crème naïve Über déjà À "
    "$3.50 $12 $ 20% 4.5% 5 7 3, 12abc 2nd 1990s 3.14 0.5 A4 x2 100 "
    "it's don't (really) \"wow\" e.g. i.e. etc. ok? yes! note: so-so well_done ; - "
    "&amp; &lt; &gt; &quot; &#39; &#x27; &nbsp; &apos; &amp &lt \\\" # @ * / é ñ ü ß"
).split()


UNESCAPE_CASES = [
    "fish &amp; chips",
    "&lt;b&gt;bold&lt;/b&gt;",
    "&quot;quoted&quot; and &apos;single&apos;",
    "&#39;num&#39; &#x27;hex&#x27; &#X41;",
    "&amp no semicolon &ltx",
    "a&nbsp;b",
    "&#128; &#150; &#0; &#x110000;",
    "&unknown; & alone &#; &#x;",
    "caf&#233; cr&#xE8;me",
]


def random_line(rng):
    n = rng.randint(0, 22)
    words = [rng.choice(SPECIAL) if rng.random() < 0.07 else rng.choice(PLAIN) for _ in range(n)]
    line = " ".join(words)
    r = rng.random()
    if r < 0.7:
        line += "."
    elif r < 0.85:
        line += ". " + " ".join(rng.choice(PLAIN + SPECIAL) for _ in range(rng.randint(1, 6)))
    if rng.random() < 0.1:
        line = line.replace(" ", "  ", 1)
    return line


def main():
    rng = random.Random(20240607)
    lines = [random_line(rng) for _ in range(200)]
    reviews = []
    i = 0
    while i < len(lines):
        k = rng.randint(1, 6)
        reviews.append(lines[i : i + k])
        i += k
    out = {
        "lines": lines,
        "preprocessed": [preprocess(l) for l in lines],
        "acceptable": [acceptable_line(preprocess(l)) for l in lines],
        "clipped": [clip_to_last_period(l) if "." in l else None for l in lines],
        "reviews": ["\n".join(r) for r in reviews],
        "pairs": [adjacent_lines("\n".join(r)) or [] for r in reviews],
        "unescape": [[u, html.unescape(u)] for u in UNESCAPE_CASES],
    }
    with open("a4_fixture.json", "w", encoding="utf-8") as f:
        json.dump(out, f, ensure_ascii=False, indent=1)


if __name__ == "__main__":
    main()
