# HMM and detector models package
