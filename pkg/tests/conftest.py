"""Shared fixtures: toy SQLite databases, documentation files, and a
miniature benchmark tree (10 questions over 2 databases)."""

from __future__ import annotations

import json
import sqlite3
from pathlib import Path

import pytest

from sqlscout.catalog import attach_database


def build_pets_db(path: Path) -> Path:
    conn = sqlite3.connect(path)
    conn.executescript(
        """
        CREATE TABLE owner (
            id INTEGER PRIMARY KEY,
            name TEXT,
            city TEXT
        );
        CREATE TABLE pet (
            id INTEGER PRIMARY KEY,
            owner_id INTEGER REFERENCES owner(id),
            species TEXT,
            age REAL
        );
        INSERT INTO owner VALUES (1, 'Ada', 'Porto'), (2, 'Bo', 'Lima');
        INSERT INTO pet VALUES
            (1, 1, 'cat', 3.5),
            (2, 1, 'dog', 2.0),
            (3, 2, 'parrot', 1.0);
        """
    )
    conn.commit()
    conn.close()
    return path


def build_library_db(path: Path) -> Path:
    conn = sqlite3.connect(path)
    conn.executescript(
        """
        CREATE TABLE book (
            id INTEGER PRIMARY KEY,
            title TEXT,
            year INTEGER
        );
        CREATE TABLE loan (
            id INTEGER PRIMARY KEY,
            book_id INTEGER REFERENCES book(id),
            member TEXT
        );
        INSERT INTO book VALUES
            (1, 'Deep Rivers', 1998),
            (2, 'Night Trains', 2004),
            (3, 'Glass Cities', 2011);
        INSERT INTO loan VALUES (1, 2, 'noa'), (2, 3, 'kim');
        """
    )
    conn.commit()
    conn.close()
    return path


def build_pets_docs(docs_dir: Path) -> Path:
    docs_dir.mkdir(parents=True, exist_ok=True)
    (docs_dir / "pet.csv").write_text(
        "original_column_name,column_name,column_description,data_format,value_description\n"
        "id,pet id,unique pet identifier,integer,\n"
        "species,,animal species of the pet,text,\"cat, dog or parrot\"\n"
        ",orphan row without original name,skipped,,\n"
        "ghost_column,,documented but not in the schema,,\n",
        encoding="utf-8",
    )
    (docs_dir / "owner.csv").write_text(
        "original_column_name,column_name,column_description,data_format,value_description\n"
        "name,owner name,full name of the owner,text,\n",
        encoding="utf-8",
    )
    return docs_dir


MINI_QUESTIONS = [
    # (id, db, text, gold, difficulty)
    ("q01", "pets", "How many pets are there?", "SELECT count(*) FROM pet", "simple"),
    ("q02", "pets", "How many owners are there?", "SELECT count(*) FROM owner", "simple"),
    ("q03", "pets", "List the species of every pet.", "SELECT species FROM pet", "simple"),
    ("q04", "pets", "How many pets are cats?", "SELECT count(*) FROM pet WHERE species = 'cat'", "moderate"),
    ("q05", "pets", "What are the names of the owners?", "SELECT name FROM owner", "simple"),
    (
        "q06",
        "pets",
        "What is the name of the owner of the parrot?",
        "SELECT o.name FROM owner o JOIN pet p ON p.owner_id = o.id WHERE p.species = 'parrot'",
        "challenging",
    ),
    ("q07", "library", "How many books are in the library?", "SELECT count(*) FROM book", "simple"),
    ("q08", "library", "How many loans are recorded?", "SELECT count(*) FROM loan", "moderate"),
    ("q09", "library", "List all book titles.", "SELECT title FROM book", "simple"),
    (
        "q10",
        "library",
        "Which books were published after 2000?",
        "SELECT title FROM book WHERE year > 2000",
        "moderate",
    ),
]


def build_mini_tree(root: Path) -> Path:
    """A miniature benchmark layout: dev.json plus dev_databases/<db>/<db>.sqlite."""
    root.mkdir(parents=True, exist_ok=True)
    records = [
        {
            "question_id": qid,
            "db_id": db,
            "question": text,
            "evidence": "",
            "SQL": gold,
            "difficulty": difficulty,
        }
        for qid, db, text, gold, difficulty in MINI_QUESTIONS
    ]
    (root / "dev.json").write_text(json.dumps(records, indent=1), encoding="utf-8")
    pets_dir = root / "dev_databases" / "pets"
    pets_dir.mkdir(parents=True, exist_ok=True)
    build_pets_db(pets_dir / "pets.sqlite")
    build_pets_docs(pets_dir / "database_description")
    lib_dir = root / "dev_databases" / "library"
    lib_dir.mkdir(parents=True, exist_ok=True)
    build_library_db(lib_dir / "library.sqlite")
    return root


@pytest.fixture
def pets_db(tmp_path) -> Path:
    return build_pets_db(tmp_path / "pets.sqlite")


@pytest.fixture
def pets_docs(tmp_path) -> Path:
    return build_pets_docs(tmp_path / "database_description")


@pytest.fixture
def pets_catalog(pets_db, pets_docs):
    return attach_database(pets_db, pets_docs)


@pytest.fixture
def library_db(tmp_path) -> Path:
    return build_library_db(tmp_path / "library.sqlite")


@pytest.fixture
def mini_tree(tmp_path) -> Path:
    return build_mini_tree(tmp_path / "bench")
