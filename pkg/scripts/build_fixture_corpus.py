"""Regenerate the shipped fixture corpus under fixtures/corpus/.

Writes a 5-lecture catalog with ASR-shaped transcripts, a triplet
annotation file, then runs the whole pipeline against the offline
synthetic responder in record mode so that fixtures/corpus/mock/ holds
one replay fixture per request. Finally writes predictions and human
scores for the evaluation stage and prints the dataset digest.

    python scripts/build_fixture_corpus.py
"""

from __future__ import annotations

import json
import random
import shutil
import sys
import tempfile
from dataclasses import replace
from pathlib import Path

from surgforge.config import load_config
from surgforge.datamodel import read_jsonl, write_jsonl
from surgforge.evaluate import Reference
from surgforge.generate import file_digest
from surgforge.llmclient import RecordingClient
from surgforge.pipeline import run_pipeline
from surgforge.testing import SyntheticClient

ROOT = Path(__file__).resolve().parent.parent / "fixtures" / "corpus"

LECTURES = [
    {
        "procedure_id": "P001",
        "title": "Laparoscopic cholecystectomy for symptomatic gallstones",
        "category": "hepatobiliary",
        "duration_s": 185.0,
        "script": [
            "Hello and welcome to this surgical lecture.",
            "Four trocars are placed in the upper abdomen.",
            "This is to allow triangulation of the instruments toward the gallbladder.",
            "The fundus of the gallbladder is grasped and retracted over the liver.",
            "This is to expose the hepatocystic triangle.",
            "Adhesions between the omentum and the gallbladder are divided with the hook.",
            "The peritoneum is opened on both sides of the triangle.",
            "Next we will dissect the cystic duct and the cystic artery.",
            "The cystic artery is identified running toward the gallbladder wall.",
            "This means the critical view of safety can now be achieved.",
            "Two clips are applied on the cystic duct.",
            "The cystic duct is divided between the clips with scissors.",
            "The gallbladder is detached from the liver bed with the hook.",
            "Because bleeding from the liver bed would obscure the plane, hemostasis is checked.",
            "The gallbladder is placed in a retrieval bag.",
            "Then we will extract the bag through the umbilical port.",
        ],
    },
    {
        "procedure_id": "P002",
        "title": "Laparoscopic Nissen fundoplication for reflux disease",
        "category": "upper gastrointestinal",
        "duration_s": 240.0,
        "script": [
            "The left lobe of the liver is retracted to expose the hiatus.",
            "The gastrohepatic ligament is opened with the vessel sealer.",
            "This is done to reach the right crus of the diaphragm.",
            "The right crus is dissected from the esophagus.",
            "A large hiatal hernia sac is visible.",
            "This shows that the hernia sac must be reduced completely.",
            "The hernia sac is pulled out of the mediastinum.",
            "The posterior vagus nerve is identified and preserved.",
            "Next we will close the crura with interrupted sutures.",
            "The crura are closed with two nonabsorbable sutures.",
            "The short gastric vessels are divided with the vessel sealer.",
            "This is to mobilize the fundus for a tension free wrap.",
            "The fundus is passed behind the esophagus.",
            "The wrap is sutured over a bougie.",
            "Thank you for watching and please subscribe.",
        ],
    },
    {
        "procedure_id": "P003",
        "title": "Laparoscopic appendectomy",
        "category": "lower gastrointestinal",
        "duration_s": 130.0,
        "script": [
            "The appendix is grasped and lifted toward the abdominal wall.",
            "The mesoappendix is divided with bipolar forceps.",
            "The reason is that the appendicular artery runs inside the mesoappendix.",
            "The base of the appendix is exposed at the cecum.",
            "Two endoloops are placed at the base of the appendix.",
            "The appendix is transected between the loops.",
            "This means the stump is secured and does not need burying.",
            "The appendix is removed in a bag.",
        ],
    },
    {
        "procedure_id": "P004",
        "title": "Laparoscopic right colectomy with intracorporeal anastomosis",
        "category": "lower gastrointestinal",
        "duration_s": 305.0,
        "script": [
            "The patient is placed in a supine position with the left side down.",
            "The ileocolic pedicle is lifted with a grasper.",
            "The peritoneum is incised below the ileocolic vessels.",
            "The duodenum is identified behind the mesentery.",
            "This means it is safe to divide the ileocolic pedicle.",
            "The ileocolic artery and vein are clipped and divided.",
            "The medial to lateral dissection continues toward the hepatic flexure.",
            "The gastrocolic ligament is opened with the vessel sealer.",
            "This is to enter the lesser sac.",
            "The hepatic flexure is mobilized from the liver.",
            "Next we will transect the ileum with a linear stapler.",
            "The ileum is transected with a linear stapler.",
            "The transverse colon is transected with a second stapler.",
            "An isoperistaltic side to side anastomosis is created.",
            "The enterotomy is closed with a running suture.",
            "Because a mesenteric gap can cause an internal hernia, the mesentery is closed.",
            "The specimen is extracted through a Pfannenstiel incision.",
        ],
    },
    {
        "procedure_id": "P005",
        "title": "Robotic adrenalectomy overview",
        "category": "endocrine",
        "duration_s": 12.0,
        "script": [
            "The adrenal vein is clipped.",
        ],
    },
]

TRIPLET_VIDEOS = [
    {
        "video_id": "VID01",
        "fps": 1,
        # (n_frames, triplets)
        "runs": [
            (8, []),
            (14, [("grasper", "retract", "gallbladder")]),
            (10, [("grasper", "retract", "gallbladder"), ("hook", "dissect", "cystic_plate")]),
            (12, [("hook", "dissect", "cystic_plate")]),
            (20, [("clipper", "clip", "cystic_duct")]),
            (6, []),
            (25, [("scissors", "cut", "cystic_duct")]),
            (30, [("grasper", "retract", "gallbladder"), ("hook", "dissect", "gallbladder")]),
            (25, [("irrigator", "aspirate", "fluid")]),
        ],
    },
    {
        "video_id": "VID02",
        "fps": 1,
        "runs": [
            (18, [("grasper", "grasp", "specimen_bag")]),
            (22, [("bipolar", "coagulate", "liver")]),
            (20, [("grasper", "pack", "gallbladder")]),
            (35, []),
        ],
    },
]


def asr_segments(script: list[str], duration: float, rng: random.Random) -> list[dict]:
    """Spread the script over the video with seeded gaps, like an ASR aligner output."""
    segments = []
    t = rng.uniform(0.5, 2.0)
    budget = duration / max(len(script), 1)
    for sentence in script:
        length = min(budget * rng.uniform(0.55, 0.85), max(1.5, duration - t))
        if t >= duration:
            break
        end = min(duration, t + length)
        segments.append({"start": round(t, 2), "end": round(end, 2), "text": " " + sentence})
        t = end + budget * rng.uniform(0.1, 0.4)
    return segments


def write_inputs() -> None:
    rng = random.Random(2024)
    catalog = []
    (ROOT / "asr").mkdir(parents=True, exist_ok=True)
    for lec in LECTURES:
        catalog.append(
            {
                "procedure_id": lec["procedure_id"],
                "title": lec["title"],
                "source_url": f"https://example.org/lectures/{lec['procedure_id'].lower()}",
                "category": lec["category"],
                "duration_s": lec["duration_s"],
            }
        )
        segs = asr_segments(lec["script"], lec["duration_s"], rng)
        with open(ROOT / "asr" / f"{lec['procedure_id']}.json", "w", encoding="utf-8") as fh:
            json.dump({"language": "en", "segments": segs}, fh, indent=1)
            fh.write("\n")
    with open(ROOT / "catalog.json", "w", encoding="utf-8") as fh:
        json.dump(catalog, fh, indent=1)
        fh.write("\n")

    with open(ROOT / "triplets.jsonl", "w", encoding="utf-8") as fh:
        for video in TRIPLET_VIDEOS:
            frames = []
            idx = 0
            for n, triplets in video["runs"]:
                for _ in range(n):
                    frames.append(
                        {
                            "frame_index": idx,
                            "triplets": [{"instrument": i, "verb": v, "target": t} for i, v, t in triplets],
                        }
                    )
                    idx += 1
            fh.write(json.dumps({"video_id": video["video_id"], "fps": video["fps"], "frames": frames}) + "\n")


def write_eval_inputs(references: list[Reference]) -> None:
    """Candidate answers with varying coverage, plus noisy human scores."""
    rng = random.Random(7)
    preds, human = [], []
    for i, ref in enumerate(sorted(references, key=lambda r: r.id)):
        obs = list(ref.reference_observations)
        keep = obs[: i % (len(obs) + 1)]
        answer = " ".join(keep) or "The video shows a laparoscopic view of the abdomen."
        preds.append({"id": ref.id, "answer": answer})
        coverage = len(keep) / len(obs)
        human.append({"id": ref.id, "human_score": max(0, min(5, round(5 * coverage + rng.choice([-1, 0, 0, 1]))))})
    write_jsonl(ROOT / "predictions.jsonl", preds, key=lambda r: r["id"])
    write_jsonl(ROOT / "human.jsonl", human, key=lambda r: r["id"])


def main() -> int:
    write_inputs()
    for stale in ("mock", "predictions.jsonl", "human.jsonl"):
        p = ROOT / stale
        if p.is_dir():
            shutil.rmtree(p)
        elif p.exists():
            p.unlink()
    config = load_config(ROOT / "config.yaml")
    with tempfile.TemporaryDirectory() as tmp:
        config = replace(config, out=Path(tmp))
        client = RecordingClient(SyntheticClient(), config.fixtures)
        pipe = run_pipeline(config, stages=("ingest", "extract", "generate", "align", "split", "export"), client=client)
        refs = read_jsonl(Path(tmp) / "export" / "references_test.jsonl", Reference)
        write_eval_inputs(refs)
        run_pipeline(config, stages=("evaluate", "stats"), client=client)
        print("dataset.jsonl sha256", file_digest(Path(tmp) / "dataset.jsonl"))
        print("fixtures recorded:", client.calls)
        print(json.dumps(pipe.status))
    return 0


if __name__ == "__main__":
    sys.exit(main())
