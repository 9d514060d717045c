import streamlit as st

from components import qa_browser

# Set page configuration
st.set_page_config(
    page_title="Segmentation QA Browser",
    page_icon="🏠",
    layout="wide",
    initial_sidebar_state="expanded"
)

# Application title and description
st.title("Segmentation QA Browser")
st.caption("Browse synthetic building scenes, their missed/mistaken areas and model assessments")

qa_browser()
