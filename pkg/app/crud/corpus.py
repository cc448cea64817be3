import json
from pathlib import Path
from typing import Dict

from app.core.exceptions import ArtifactNotFoundError, ChecksumError
from app.core.logger import logger
from app.crud.tensor_store import read_tensors, write_tensors
from app.schema.world_schema import ActionDelta, Corpus, Episode, Observation, Policy, Pose, WorldConfig
from app.utils.seeding import bytes_digest

MANIFEST = "corpus.json"


class CorpusCrud:
    """Filesystem store for a generated corpus: one manifest plus one tensor file per episode."""

    def __init__(self, root: Path):
        self.root = Path(root)

    def episode_path(self, index: int) -> Path:
        return self.root / "episodes" / f"episode_{index:05d}.bin"

    def exists(self) -> bool:
        return (self.root / MANIFEST).is_file()

    # save corpus
    def save(self, corpus: Corpus) -> Dict[str, str]:
        """Write every episode and the manifest; returns sha256 per written file."""
        checksums = {}
        for index, episode in enumerate(corpus.episodes):
            path = self.episode_path(index)
            checksums[str(path.relative_to(self.root))] = write_tensors(
                path,
                {
                    "poses": episode.pose_array(),
                    "actions": episode.action_array(),
                    "observations": episode.observation_array(),
                },
            )
        manifest = {
            "world_seed": corpus.world_seed,
            "world_config": corpus.world_config.model_dump(mode="json"),
            "policy": corpus.policy.value,
            "data_seed": corpus.data_seed,
            "action_scale": corpus.action_scale,
            "n_episodes": len(corpus.episodes),
            "episodes": checksums,
        }
        raw = json.dumps(manifest, indent=2, sort_keys=True).encode("utf-8")
        (self.root / MANIFEST).write_bytes(raw)
        checksums[MANIFEST] = bytes_digest(raw)
        logger.info(f"Saved corpus of {len(corpus.episodes)} episodes to {self.root}")
        return checksums

    # load corpus
    def load(self, verify: bool = True) -> Corpus:
        manifest_path = self.root / MANIFEST
        if not manifest_path.is_file():
            raise ArtifactNotFoundError(manifest_path, "corpus manifest")
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))

        episodes = []
        for index in range(manifest["n_episodes"]):
            path = self.episode_path(index)
            if verify and path.is_file():
                expected = manifest["episodes"][str(path.relative_to(self.root))]
                if bytes_digest(path.read_bytes()) != expected:
                    raise ChecksumError(f"episode file {path} does not match its recorded checksum")
            tensors, _ = read_tensors(path)
            episodes.append(
                Episode(
                    poses=[Pose.from_array(p) for p in tensors["poses"]],
                    actions=[ActionDelta.from_array(a) for a in tensors["actions"]],
                    observations=[Observation(grid=g) for g in tensors["observations"]],
                    world_seed=manifest["world_seed"],
                    action_scale=manifest["action_scale"],
                )
            )
        return Corpus(
            world_seed=manifest["world_seed"],
            world_config=WorldConfig(**manifest["world_config"]),
            policy=Policy(manifest["policy"]),
            data_seed=manifest["data_seed"],
            action_scale=manifest["action_scale"],
            episodes=episodes,
        )

    def digest(self) -> str:
        """sha256 of the manifest, which itself pins every episode file."""
        path = self.root / MANIFEST
        if not path.is_file():
            raise ArtifactNotFoundError(path, "corpus manifest")
        return bytes_digest(path.read_bytes())
