"""
Data loader for corpus manifests, split files, run manifests and score files.
Manifest rows point at PCM16 WAV files relative to the manifest's directory.
"""

import logging
import os

import pandas as pd
from dotenv import dotenv_values

from dsp import Device, FeatureConfig, FeatureMatrix, Label, extract_features, load_feature_cache, \
    read_wav, save_feature_cache
from errors import ConfigError, DataError

logger = logging.getLogger(__name__)

MANIFEST_COLUMNS = ["id", "path", "device", "label", "subset"]
SCORE_COLUMNS = ["utterance_id", "score", "label", "device"]
SPLIT_SECTIONS = ("source_train", "source_test", "target_adapt", "target_test")


def load_manifest(csv_path: str) -> pd.DataFrame:
    """
    Load and validate a corpus manifest.

    Args:
        csv_path: Path to manifest.csv (columns id,path,device,label,subset).

    Returns:
        DataFrame with an extra `wav_path` column holding absolute file paths.
    """
    if not os.path.exists(csv_path):
        raise DataError(f"manifest not found: {csv_path}")
    try:
        df = pd.read_csv(csv_path, dtype=str, keep_default_na=False)
    except (pd.errors.ParserError, UnicodeDecodeError) as e:
        raise DataError(f"unreadable manifest {csv_path}: {e}") from e

    missing = [c for c in MANIFEST_COLUMNS if c not in df.columns]
    if missing:
        raise DataError(f"manifest {csv_path} lacks columns: {', '.join(missing)}")

    duplicated = df["id"][df["id"].duplicated()].tolist()
    if duplicated:
        raise DataError(f"manifest {csv_path} repeats ids: {', '.join(duplicated[:5])}")

    unknown = sorted(set(df["subset"]) - set(SPLIT_SECTIONS))
    if unknown:
        raise DataError(f"manifest {csv_path} has unknown subsets: {', '.join(unknown)}")

    base = os.path.dirname(os.path.abspath(csv_path))
    df["wav_path"] = [p if os.path.isabs(p) else os.path.join(base, p) for p in df["path"]]
    logger.info("Loaded manifest %s: %d utterances.", csv_path, len(df))
    return df


def _label_of(value: str) -> Label | None:
    return Label(value) if value else None


def load_utterances(manifest: pd.DataFrame, ids: list[str] | None = None) -> dict:
    """Read the WAV files of the given ids (all rows if None) into Utterances keyed by id."""
    rows = manifest if ids is None else manifest[manifest["id"].isin(set(ids))]
    utterances = {}
    for row in rows.itertuples(index=False):
        utterances[row.id] = read_wav(row.wav_path, device=Device(row.device),
                                      label=_label_of(row.label), utterance_id=row.id)
    logger.info("Read %d WAV files.", len(utterances))
    return utterances


def load_features(manifest: pd.DataFrame, config: FeatureConfig, stack: bool,
                  ids: list[str] | None = None, cache_dir: str | None = None) -> dict[str, FeatureMatrix]:
    """
    Extract features for manifest rows, reusing DAVF caches when cache_dir is given.

    Returns:
        Mapping of utterance id to FeatureMatrix.
    """
    utterances = load_utterances(manifest, ids)
    features = {}
    hits = 0
    for utt_id, utterance in utterances.items():
        cache_path = None
        if cache_dir is not None:
            suffix = "stacked" if stack else "frames"
            cache_path = os.path.join(cache_dir, config.cache_key(), f"{utt_id}.{suffix}.davf")
        if cache_path and os.path.exists(cache_path):
            try:
                data = load_feature_cache(cache_path)
            except DataError as e:
                logger.warning("Ignoring unreadable cache, re-extracting: %s", e)
            else:
                features[utt_id] = FeatureMatrix(data, config, utt_id,
                                                 context=config.context if stack else 1)
                hits += 1
                continue
        fm = extract_features(utterance, config, stack=stack)
        if cache_path:
            os.makedirs(os.path.dirname(cache_path), exist_ok=True)
            save_feature_cache(cache_path, fm)
        features[utt_id] = fm
    logger.info("Features %s for %d utterances (%d from cache).", config.label(), len(features), hits)
    return features


def split_from_manifest(manifest: pd.DataFrame) -> dict[str, list[str]]:
    return {name: manifest.loc[manifest["subset"] == name, "id"].tolist() for name in SPLIT_SECTIONS}


def load_split(path: str) -> dict[str, list[str]]:
    """Split file: `[section]` headers followed by one utterance id per line."""
    sections: dict[str, list[str]] = {name: [] for name in SPLIT_SECTIONS}
    current = None
    try:
        with open(path, "r", encoding="utf-8") as f:
            for lineno, raw in enumerate(f, 1):
                line = raw.strip()
                if not line or line.startswith("#"):
                    continue
                if line.startswith("[") and line.endswith("]"):
                    current = line[1:-1].strip()
                    if current not in sections:
                        raise DataError(f"{path}:{lineno}: unknown section [{current}]")
                    continue
                if current is None:
                    raise DataError(f"{path}:{lineno}: id before any section header")
                sections[current].append(line)
    except FileNotFoundError as e:
        raise DataError(f"split file not found: {path}") from e
    return sections


def write_split(path: str, sections: dict[str, list[str]]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for name in SPLIT_SECTIONS:
            f.write(f"[{name}]\n")
            for utt_id in sections.get(name, []):
                f.write(f"{utt_id}\n")


def load_run_manifest(path: str) -> dict[str, str]:
    """Parse a key=value run manifest (same syntax as a .env file)."""
    if not os.path.exists(path):
        raise ConfigError(f"run manifest not found: {path}")
    values = {k: v for k, v in dotenv_values(path).items() if v is not None}
    logger.info("Loaded run manifest %s (%d keys).", path, len(values))
    return values


def write_scores(path: str, records: list[dict]) -> pd.DataFrame:
    df = pd.DataFrame(records, columns=SCORE_COLUMNS)
    df.to_csv(path, index=False)
    logger.info("Wrote %d scores to %s.", len(df), path)
    return df


def load_scores(path: str) -> pd.DataFrame:
    if not os.path.exists(path):
        raise DataError(f"scores file not found: {path}")
    df = pd.read_csv(path, dtype={"utterance_id": str, "label": str, "device": str})
    missing = [c for c in SCORE_COLUMNS if c not in df.columns]
    if missing:
        raise DataError(f"scores file {path} lacks columns: {', '.join(missing)}")
    return df
