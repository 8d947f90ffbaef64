import pathlib
import runpy

import pytest

DEMOS = pathlib.Path(__file__).resolve().parents[1] / "demos"


# the ablation demo repeats what the acceptance suite already runs
@pytest.mark.parametrize("name", ["01_geo_and_solar.py", "02_night_transform.py",
                                  "03_losses_and_training.py", "04_retrieval_and_recall.py"])
def test_demo_runs(name, capsys):
    runpy.run_path(str(DEMOS / name), run_name="__main__")
    assert capsys.readouterr().out.strip()
