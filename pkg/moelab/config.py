PYDANTIC_EXTRA = 'forbid'  # or 'allow' or 'ignore'

#: indentation of the JSON files moelab writes (run configs, reports, run cards)
JSON_INDENT = 2
