"""
Streamlit Adapter Module

This module adapts the QA browser service to the Streamlit UI framework.
"""
from typing import Any, Dict
import logging

import streamlit as st

from config.config_manager import ConfigManager
from services.qa_browser_service import QaBrowserService
from utils.env_utils import is_running_in_docker
from utils.error_utils import AppError, handle_error

# Configure logging
logger = logging.getLogger(__name__)
logger.setLevel(logging.INFO)


class StreamlitQaAdapter:
    """
    Adapter class that connects the QA browser service with Streamlit UI.
    Handles UI state management and user interactions.
    """

    def __init__(self):
        self._initialize_services()
        self._initialize_session_state()

    def _initialize_services(self):
        """Initialize service instances."""
        if 'qa_browser_service' not in st.session_state:
            st.session_state['qa_browser_service'] = QaBrowserService()
        if 'config_manager' not in st.session_state:
            st.session_state['config_manager'] = ConfigManager()
        self.browser = st.session_state['qa_browser_service']
        self.config = st.session_state['config_manager']

    def _initialize_session_state(self):
        """Initialize Streamlit session state variables."""
        defaults = {
            'dataset_open': False,
            'dataset_summary': None,
            'scene_position': 0,
            'scene_page': 1,
            'model_loaded': False,
            'model_summary': None,
        }
        for key, value in defaults.items():
            if key not in st.session_state:
                st.session_state[key] = value

    def _handle_error(self, error: Exception) -> None:
        """Handle and display errors in the UI."""
        error_data = handle_error(error)
        st.error(error_data['error']['message'])
        if isinstance(error, AppError) and error_data['error']['details']:
            st.json(error_data['error']['details'])

    def _show_failure(self, result: Dict[str, Any]) -> None:
        st.error(result['error']['message'])
        if result['error'].get('details'):
            st.json(result['error']['details'])

    def open_dataset(self, directory: str) -> bool:
        with st.spinner(f"Loading dataset from {directory}..."):
            result = self.browser.open_dataset(directory)
        if not result['success']:
            self._show_failure(result)
            return False
        st.session_state['dataset_open'] = True
        st.session_state['dataset_summary'] = result['data']
        st.session_state['scene_position'] = 0
        return True

    def handle_dataset(self):
        """Dataset selection panel; opens the configured data directory automatically in Docker."""
        try:
            data_dir = self.config.get('data_dir')
            if is_running_in_docker() and not st.session_state['dataset_open']:
                self.open_dataset(data_dir)
            if not st.session_state['dataset_open']:
                with st.expander("Dataset", expanded=True):
                    directory = st.text_input("Dataset directory", value=data_dir, placeholder="/path/to/dataset")
                    if st.button("Open"):
                        if self.open_dataset(directory):
                            st.rerun()
        except Exception as e:
            self._handle_error(e)

    def handle_model(self):
        with st.sidebar:
            st.subheader("Model")
            weights = st.text_input("Weights file (.aqsw)", placeholder="runs/full/weights.aqsw")
            config_path = st.text_input("Model config (optional)")
            if st.button("Load model") and weights:
                result = self.browser.load_model(weights, config_path)
                if result['success']:
                    st.session_state['model_loaded'] = True
                    st.session_state['model_summary'] = result['data']
                else:
                    self._show_failure(result)
            if st.session_state['model_summary']:
                st.json(st.session_state['model_summary'])

    def display_scene_table(self):
        result = self.browser.list_scenes(st.session_state['scene_page'])
        if not result['success']:
            self._show_failure(result)
            return
        data = result['data']
        st.dataframe(data['data'], use_container_width=True, hide_index=True)
        col1, col2, col3 = st.columns([1, 2, 1])
        with col1:
            if data['has_previous'] and st.button("◀ Previous"):
                st.session_state['scene_page'] -= 1
                st.rerun()
        with col3:
            if data['has_next'] and st.button("Next ▶"):
                st.session_state['scene_page'] += 1
                st.rerun()
        with col2:
            st.write(f"Page {st.session_state['scene_page']} of {data['total_pages']}")

    def display_scene(self):
        summary = st.session_state['dataset_summary']
        position = st.number_input("Scene", min_value=0, max_value=max(0, summary['count'] - 1),
                                   value=st.session_state['scene_position'], step=1)
        st.session_state['scene_position'] = int(position)
        result = self.browser.get_scene(int(position))
        if not result['success']:
            self._show_failure(result)
            return
        scene = result['data']
        columns = st.columns(4)
        for column, key, caption in zip(columns, ('image', 'mask', 'gt', 'overlay'),
                                        ("Image", "Segmentation", "Ground truth", "QA ground truth")):
            column.image(scene[key], caption=caption, use_container_width=True, clamp=True)
        st.caption("Green: missed areas. Red: mistaken areas.")
        with st.expander("Instances"):
            st.dataframe(scene['instances'], use_container_width=True, hide_index=True)
            st.json(scene['metadata'])
        if st.session_state['model_loaded'] and st.button("Assess scene"):
            assessed = self.browser.assess_scene(int(position))
            if assessed['success']:
                st.image(assessed['data']['overlay'], caption="Predicted QA", clamp=True)
                st.dataframe(assessed['data']['metrics'], hide_index=True)
            else:
                self._show_failure(assessed)

    def run_browser_interface(self):
        """Run the main browser interface."""
        self.handle_dataset()
        self.handle_model()
        if not st.session_state['dataset_open']:
            st.info("Open a dataset directory written by `gen-data` to start.")
            return
        try:
            summary = st.session_state['dataset_summary']
            st.write(f"{summary['count']} scenes in {summary['directory']}: "
                     f"{summary['splits']} split, sensors {summary['sensors']}")
            tab1, tab2 = st.tabs(["Scenes", "Viewer"])
            with tab1:
                self.display_scene_table()
            with tab2:
                self.display_scene()
        except Exception as e:
            self._handle_error(e)
