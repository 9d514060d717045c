# Dependencies:
# pip install pytest-mock
import pytest

from config.config_manager import ConfigManager
from services.dataset_service import DatasetService
from services.qa_browser_service import QaBrowserService


@pytest.fixture
def written_dataset(tmp_path, scene_config):
    directory = str(tmp_path / "data")
    DatasetService(show_progress=False).write(directory, scene_config, 5)
    return directory


class TestQaBrowser:

    # Initializes session state variables when not present
    def test_initializes_session_state_variables(self, mocker):
        # Setup
        mocker.patch('streamlit.session_state', {})
        mocker.patch('adapters.streamlit_adapter.is_running_in_docker', return_value=False)

        # Execute
        from components.qa_browser import qa_browser
        qa_browser()

        # Assert
        import streamlit as st
        assert st.session_state['dataset_open'] is False
        assert st.session_state['dataset_summary'] is None
        assert st.session_state['scene_position'] == 0
        assert st.session_state['scene_page'] == 1
        assert st.session_state['model_loaded'] is False
        assert 'qa_browser_service' in st.session_state
        assert 'config_manager' in st.session_state

    # In Docker the configured data directory is opened automatically
    def test_docker_opens_data_dir(self, mocker):
        # Setup
        mocker.patch('streamlit.session_state', {
            'dataset_open': False,
            'dataset_summary': None,
            'scene_position': 0,
            'scene_page': 1,
            'model_loaded': False,
            'model_summary': None,
        })
        mocker.patch('adapters.streamlit_adapter.is_running_in_docker', return_value=True)
        mocker.patch.dict('os.environ', {'HOST_DATA_PATH': '/app/data'})
        mock_open = mocker.patch('adapters.streamlit_adapter.StreamlitQaAdapter.open_dataset', return_value=False)
        mock_expander = mocker.patch('streamlit.expander')

        # Execute
        from components.qa_browser import qa_browser
        qa_browser()

        # Assert
        mock_open.assert_called_once()
        mock_expander.assert_called_once()


class TestQaBrowserService:

    # Opening a dataset summarises it
    def test_open_dataset(self, written_dataset):
        service = QaBrowserService()
        result = service.open_dataset(written_dataset)
        assert result['success'] is True
        assert result['data']['count'] == 5
        assert sum(result['data']['sensors'].values()) == 5

    # A missing directory comes back as an error envelope
    def test_open_missing_dataset(self, tmp_path):
        result = QaBrowserService().open_dataset(str(tmp_path / "nowhere"))
        assert result['success'] is False
        assert result['error']['type'] == "UsageError"

    # The scene table pages through the dataset
    def test_list_scenes(self, written_dataset):
        service = QaBrowserService()
        service.open_dataset(written_dataset)
        first = service.list_scenes(1, page_size=2)['data']
        last = service.list_scenes(3, page_size=2)['data']
        assert first['total_pages'] == 3
        assert len(first['data']) == 2
        assert first['has_next'] and not first['has_previous']
        assert len(last['data']) == 1
        assert not last['has_next']

    # Scenes render with the QA overlay; positions are checked
    def test_get_scene(self, written_dataset):
        service = QaBrowserService()
        service.open_dataset(written_dataset)
        scene = service.get_scene(0)['data']
        assert scene['overlay'].shape == (64, 64, 3)
        assert scene['image'].shape == (64, 64, 3)
        assert service.get_scene(5)['success'] is False

    # Assessing needs a loaded model
    def test_assess_without_model(self, written_dataset):
        service = QaBrowserService()
        service.open_dataset(written_dataset)
        result = service.assess_scene(0)
        assert result['success'] is False
        assert "model" in result['error']['message']


class TestConfigManager:

    # The config file overrides defaults and the environment overrides the file
    def test_layering(self, tmp_path, mocker):
        # Setup
        path = tmp_path / "config.json"
        path.write_text('{"workers": 3, "output_dir": "from_file", "colour": "blue"}')
        mocker.patch.dict('os.environ', {'AQSNET_OUTPUT_DIR': '/tmp/from_env', 'AQSNET_LOG_LEVEL': 'debug'})

        # Execute
        config = ConfigManager(str(path))

        # Assert
        assert config.get('workers') == 3
        assert config.get('output_dir') == '/tmp/from_env'
        assert config.get('log_level') == 'DEBUG'
        assert config.get('colour') is None
        assert config.get('show_progress') is True

    # Unparseable environment values keep the previous setting
    def test_invalid_env_ignored(self, tmp_path, mocker):
        mocker.patch.dict('os.environ', {'AQSNET_WORKERS': 'many', 'AQSNET_SHOW_PROGRESS': 'off'})
        config = ConfigManager(str(tmp_path / "missing.json"))
        assert config.get('workers') == 1
        assert config.get('show_progress') is False

    # A malformed config file falls back to defaults
    def test_malformed_file(self, tmp_path):
        path = tmp_path / "config.json"
        path.write_text("{not json")
        config = ConfigManager(str(path))
        assert config.get('output_dir') == 'runs'
