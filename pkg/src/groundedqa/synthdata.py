"""
Desk-scale synthetic corpora with optionally planted, linearly recoverable
answer signals in the feature packs. Telling answers are single class words
so log-likelihood scoring carries no length bias at initialization.
"""

from . import featurestore
from .datamodel import (TELLING_CATEGORIES, BoundingBox, Corpus,
                        ObjectGrounding, QARecord)

CLASS_WORDS = ("red", "green", "blue", "yellow")

_TELLING_QUESTIONS = {
    "what": "what color is the big object ?",
    "where": "where is the bright patch ?",
    "when": "when does the light turn on ?",
    "who": "who painted the object ?",
    "why": "why is the object marked ?",
    "how": "how is the object colored ?",
}
_POINTING_QUESTION = "which region holds the marker ?"
_REGION_NAMES = ("cat", "dog", "sky", "tree", "car")
_IMAGE_SIZE = 700
_QUADRANTS = (
    BoundingBox(50, 50, 200, 200),
    BoundingBox(400, 50, 200, 200),
    BoundingBox(50, 400, 200, 200),
    BoundingBox(400, 400, 200, 200),
)


def synth_corpus(n_telling, n_pointing, seed, planted=True,
                 global_dim=featurestore.GLOBAL_DIM,
                 conv_cells=featurestore.CONV_CELLS,
                 conv_channels=featurestore.CONV_CHANNELS):
    """
    Build (corpus, packs). One image per record; telling answer classes and
    pointing correct slots cycle so every corpus is balanced.
    """
    images = []
    records = []
    packs = {}
    for i in range(n_telling):
        cls = i % len(CLASS_WORDS)
        category = TELLING_CATEGORIES[i % len(TELLING_CATEGORIES)]
        qa_id = f"t{i:05d}"
        image_id = f"imgt{i:05d}"
        images.append((image_id, _IMAGE_SIZE, _IMAGE_SIZE))
        records.append(QARecord(
            qa_id=qa_id, image_id=image_id, kind="telling",
            category=category, question=_TELLING_QUESTIONS[category],
            answer=CLASS_WORDS[cls],
            distractors=[w for w in CLASS_WORDS if w != CLASS_WORDS[cls]]))
        packs[image_id] = featurestore.synth_feature_pack(
            image_id, seed, planted_signal=cls if planted else None,
            global_dim=global_dim, conv_cells=conv_cells,
            conv_channels=conv_channels)
    for j in range(n_pointing):
        slot = j % 4
        qa_id = f"p{j:05d}"
        image_id = f"imgp{j:05d}"
        images.append((image_id, _IMAGE_SIZE, _IMAGE_SIZE))
        region_ids = [f"{qa_id}_r{k}" for k in range(4)]
        groundings = [
            ObjectGrounding(grounding_id=rid,
                            name=_REGION_NAMES[(j + k) % len(_REGION_NAMES)],
                            box=_QUADRANTS[k])
            for k, rid in enumerate(region_ids)]
        answer = region_ids[slot]
        records.append(QARecord(
            qa_id=qa_id, image_id=image_id, kind="pointing",
            category="which", question=_POINTING_QUESTION,
            answer=answer,
            distractors=[r for r in region_ids if r != answer],
            groundings=groundings))
        packs[image_id] = featurestore.synth_feature_pack(
            image_id, seed, planted_signal=slot if planted else None,
            region_ids=region_ids, correct_region=answer,
            global_dim=global_dim, conv_cells=conv_cells,
            conv_channels=conv_channels)
    corpus = Corpus(images=images, records=records)
    corpus.validate()
    return corpus, packs
