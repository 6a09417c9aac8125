from .dispatch import apply_recipe, make_groups, thread_count
from .recipe import ALL_METHODS, METHODS, MergedModel, MergeRecipe, load_recipe, parse_recipe

__all__ = ["apply_recipe", "make_groups", "thread_count", "ALL_METHODS", "METHODS", "MergedModel",
           "MergeRecipe", "load_recipe", "parse_recipe"]
