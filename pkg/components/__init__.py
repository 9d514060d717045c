# Components package initialization
from .qa_browser import qa_browser

__all__ = ['qa_browser']
