"""Vision-aided mmWave beam selection under spatial proxy attacks."""

__version__ = "0.1.0"
