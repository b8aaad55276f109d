import pytest
import logging

from ck_seu_diffusion.campaign_runner import CampaignConfig
from ck_seu_diffusion.fault_injector import InjectionSpec
from ck_seu_diffusion.naming_scheme import TensorSelector
from ck_seu_diffusion.toy_diffusion_model import CkToyDiffuser, DiffuserConfig

logger = logging.getLogger(__name__)

class Data:
    fixture_folder: str = 'tests/fixtures'
    minimal_config_file: str = 'campaign-minimal.yaml'
    trials_zero_config_file: str = 'campaign-trials-zero.yaml'
    typo_config_file: str = 'campaign-typo.yaml'
    small_config_file: str = 'campaign-small.json'
    naming_scheme_file: str = 'naming-scheme-custom.yaml'
    toy_cfg: DiffuserConfig = None

    def __init__(self):
        Data.toy_cfg = DiffuserConfig()

    def path(self, file_name: str) -> str:
        return f'{Data.fixture_folder}/{file_name}'


@pytest.fixture(scope="module")
def toy_cfg():
    """Fixture to return the default toy diffuser configuration."""
    return Data().toy_cfg

@pytest.fixture(scope="module")
def diffuser(toy_cfg):
    """Fixture to return a toy diffuser."""
    return CkToyDiffuser(toy_cfg)

@pytest.fixture(scope="module")
def toy_store(diffuser):
    """Fixture to return the seeded untrained checkpoint of the toy diffuser."""
    return diffuser.init_checkpoint()

@pytest.fixture(scope="module")
def small_campaign_cfg(toy_cfg):
    """Fixture to return a two-target, two-trial, two-prompt campaign."""
    targets = (
        InjectionSpec(TensorSelector('down', 0, 0, 'sa', 'wv')),
        InjectionSpec(TensorSelector('up', 0, 1, 'ca', 'wv')),
    )
    return CampaignConfig(targets=targets, prompts=('a red car', 'a blue beach umbrella'), trials=2,
                          master_seed=11, model=toy_cfg, name='small')

@pytest.fixture(scope="module")
def minimal_config_path():
    """Fixture to return the path to a campaign file with only a target."""
    return Data().path(Data.minimal_config_file)

@pytest.fixture(scope="module")
def trials_zero_config_path():
    """Fixture to return the path to a campaign file with trials = 0."""
    return Data().path(Data.trials_zero_config_file)

@pytest.fixture(scope="module")
def typo_config_path():
    """Fixture to return the path to a campaign file with a misspelled key."""
    return Data().path(Data.typo_config_file)

@pytest.fixture(scope="module")
def small_config_path():
    """Fixture to return the path to a small JSON campaign file."""
    return Data().path(Data.small_config_file)

@pytest.fixture(scope="module")
def naming_scheme_path():
    """Fixture to return the path to a user naming table."""
    return Data().path(Data.naming_scheme_file)
