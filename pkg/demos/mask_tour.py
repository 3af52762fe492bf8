"""Print the compressed and full attention masks for one joint-mode prompt.

Rows are queries, columns keys; '+' is visible, '-' blocked.  Under the
compressed mask the question and answer rows cannot see the image or the
embedding instruction, only the system prefix, the chorus span and each other.
"""
from chorus import ModelConfig, Sample, Task, assemble, build_mask
from chorus.data import REPRESENT_IMAGE, gen_image
from chorus.masks import render


def main() -> None:
    cfg = ModelConfig(k_chorus=3)
    sample = Sample(REPRESENT_IMAGE, gen_image(0, rows=2, cols=2), "how many circle ?", "1", Task.GENERATION)
    layout = assemble(sample, "joint", cfg)
    for compressed in (False, True):
        print("compressed" if compressed else "full causal")
        print(render(build_mask(layout, compressed), layout))
        print()


if __name__ == "__main__":
    main()
