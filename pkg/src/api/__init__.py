# Fleet detection service package
