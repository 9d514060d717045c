"""
QA Browser Component

Entry point of the interactive quality-assessment browser.
It initializes and runs the StreamlitQaAdapter.
"""
from adapters.streamlit_adapter import StreamlitQaAdapter


def qa_browser():
    """
    Initialize and run the QA browser.
    Uses the StreamlitQaAdapter for all UI and dataset interactions.
    """
    adapter = StreamlitQaAdapter()
    adapter.run_browser_interface()


if __name__ == "__main__":
    qa_browser()
